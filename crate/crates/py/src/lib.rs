//! The `hekate_mini` extension module: Python access to the content store,
//! the wire codec, a seeder running on a background thread, and the
//! runtime's benchmark suite.
//!
//! The seeder's event loop is confined to one thread, so the Python handle
//! exposes only the thread-safe slice of its control surface: the bound
//! port, the atomic counters, and stop.

use std::net::TcpListener;
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::Duration;

use pyo3::exceptions::{PyConnectionError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyTuple};

use hekate_core::seeder::wire;
use hekate_core::{
    sim_local, spawn_seeder, ContentStore as CoreStore, RequestPattern, Runtime, RuntimeStats,
    SeederConfig, SeederHandle, SeederStats, SimOptions, SimPeerConfig, SimSummary,
};

fn arr20(name: &str, bytes: &[u8]) -> PyResult<[u8; 20]> {
    bytes.try_into().map_err(|_| {
        PyValueError::new_err(format!("{name} must be exactly 20 bytes, got {}", bytes.len()))
    })
}

/// Seedable content held in memory: bytes cut into fixed-length pieces with
/// a stable 20-byte content id.
#[pyclass(module = "hekate_mini", frozen)]
struct ContentStore {
    inner: Arc<CoreStore>,
}

#[pymethods]
impl ContentStore {
    #[new]
    #[pyo3(signature = (data, piece_length=262_144))]
    fn new(data: &[u8], piece_length: u32) -> PyResult<Self> {
        let inner = CoreStore::from_bytes(data, piece_length)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn piece_length(&self) -> u32 {
        self.inner.piece_length()
    }

    /// The 20-byte content id peers must present in their handshake.
    fn info_hash<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.info_hash())
    }

    fn __repr__(&self) -> String {
        format!(
            "ContentStore(len={}, piece_length={})",
            self.inner.len(),
            self.inner.piece_length()
        )
    }
}

/// A seeder bound to a local TCP port, its event loop running on a
/// dedicated background thread. Usable as a context manager; `stop()` is
/// idempotent.
#[pyclass(module = "hekate_mini")]
struct Seeder {
    handle: SeederHandle,
    info_hash: [u8; 20],
    thread: Option<JoinHandle<Result<(), String>>>,
}

#[pymethods]
impl Seeder {
    #[getter]
    fn port(&self) -> u16 {
        self.handle.port()
    }

    fn info_hash<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.info_hash)
    }

    /// A snapshot of the serving counters. Callable from any thread, while
    /// the seeder runs or after it stops.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        seeder_stats_dict(py, &self.handle.stats())
    }

    fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }

    /// Stops accepting, shuts every live session down, and waits for the
    /// loop thread to drain and exit.
    fn stop(&mut self, py: Python<'_>) -> PyResult<()> {
        let Some(thread) = self.thread.take() else {
            return Ok(());
        };
        let handle = self.handle.clone();
        py.detach(move || {
            handle.stop();
            thread.join()
        })
        .map_err(|_| PyRuntimeError::new_err("seeder thread panicked"))?
        .map_err(PyRuntimeError::new_err)
    }

    fn __enter__(slf: PyRef<'_, Self>) -> PyRef<'_, Self> {
        slf
    }

    #[pyo3(signature = (*args))]
    fn __exit__(&mut self, py: Python<'_>, args: &Bound<'_, PyTuple>) -> PyResult<bool> {
        let _ = args;
        self.stop(py)?;
        Ok(false)
    }

    fn __repr__(&self) -> String {
        format!("Seeder(port={}, running={})", self.handle.port(), self.is_running())
    }
}

impl Drop for Seeder {
    fn drop(&mut self) {
        // Last-resort cleanup if the user never called stop: signal the
        // loop so its thread winds down, but do not block the collector on
        // the join.
        if self.thread.is_some() {
            self.handle.stop();
        }
    }
}

/// Starts a seeder over `store` on 127.0.0.1 (an OS-assigned port by
/// default) and returns once the listener is bound and serving.
#[pyfunction]
#[pyo3(signature = (store, port=0, unchoke_fraction=0.10, choke_interval_ms=1000, idle_timeout_ms=30_000))]
fn start_seeder(
    py: Python<'_>,
    store: &ContentStore,
    port: u16,
    unchoke_fraction: f64,
    choke_interval_ms: u64,
    idle_timeout_ms: u64,
) -> PyResult<Seeder> {
    let listener = TcpListener::bind(("127.0.0.1", port))
        .map_err(|e| PyConnectionError::new_err(format!("bind 127.0.0.1:{port}: {e}")))?;
    let store = store.inner.clone();
    let info_hash = store.info_hash();
    let config = SeederConfig {
        unchoke_fraction,
        choke_interval: Duration::from_millis(choke_interval_ms),
        idle_timeout: Duration::from_millis(idle_timeout_ms),
        ..SeederConfig::default()
    };

    let (tx, rx) = mpsc::channel();
    let thread = std::thread::Builder::new()
        .name("hekate-seeder".into())
        .spawn(move || {
            let rt = Runtime::new();
            match spawn_seeder(&rt, listener, store, config) {
                Ok(handle) => {
                    let _ = tx.send(Ok(handle));
                    rt.run().map_err(|e| e.to_string())
                }
                Err(e) => {
                    let _ = tx.send(Err(e.to_string()));
                    Ok(())
                }
            }
        })
        .map_err(|e| PyRuntimeError::new_err(format!("spawn seeder thread: {e}")))?;

    match py.detach(move || rx.recv()) {
        Ok(Ok(handle)) => Ok(Seeder { handle, info_hash, thread: Some(thread) }),
        Ok(Err(e)) => {
            let _ = thread.join();
            Err(PyRuntimeError::new_err(e))
        }
        Err(_) => {
            let _ = thread.join();
            Err(PyRuntimeError::new_err("seeder thread exited before reporting"))
        }
    }
}

/// Incremental decoder for the length-prefixed frame stream that follows
/// the handshake. Feed it raw socket bytes; it yields one dict per frame.
#[pyclass(module = "hekate_mini")]
struct FrameReader {
    inner: wire::FrameDecoder,
}

#[pymethods]
impl FrameReader {
    #[new]
    fn new() -> Self {
        Self { inner: wire::FrameDecoder::new() }
    }

    fn push(&mut self, data: &[u8]) {
        self.inner.push(data);
    }

    #[getter]
    fn buffered(&self) -> usize {
        self.inner.buffered()
    }

    /// The next complete frame as a dict with a "type" key, or None if more
    /// bytes are needed. Raises ValueError on a malformed stream.
    fn next_frame<'py>(&mut self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        match self.inner.next_frame() {
            Ok(None) => Ok(None),
            Ok(Some(msg)) => message_dict(py, &msg).map(Some),
            Err(e) => Err(PyValueError::new_err(e.to_string())),
        }
    }
}

fn message_dict<'py>(py: Python<'py>, msg: &wire::Message) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    match msg {
        wire::Message::KeepAlive => d.set_item("type", "keepalive")?,
        wire::Message::Choke => d.set_item("type", "choke")?,
        wire::Message::Unchoke => d.set_item("type", "unchoke")?,
        wire::Message::Interested => d.set_item("type", "interested")?,
        wire::Message::NotInterested => d.set_item("type", "not_interested")?,
        wire::Message::Request { index, begin, length } => {
            d.set_item("type", "request")?;
            d.set_item("index", index)?;
            d.set_item("begin", begin)?;
            d.set_item("length", length)?;
        }
        wire::Message::Piece { index, begin, data } => {
            d.set_item("type", "piece")?;
            d.set_item("index", index)?;
            d.set_item("begin", begin)?;
            d.set_item("data", PyBytes::new(py, data))?;
        }
    }
    Ok(d)
}

fn frame<'py>(py: Python<'py>, msg: &wire::Message) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &wire::encode_to_vec(msg))
}

/// The 54-byte handshake carrying a 20-byte content id and peer id.
#[pyfunction]
fn encode_handshake<'py>(
    py: Python<'py>,
    info_hash: &[u8],
    peer_id: &[u8],
) -> PyResult<Bound<'py, PyBytes>> {
    let hs = wire::encode_handshake(&arr20("info_hash", info_hash)?, &arr20("peer_id", peer_id)?);
    Ok(PyBytes::new(py, &hs))
}

/// Splits a received handshake into (info_hash, peer_id). Raises ValueError
/// on a bad length or protocol tag.
#[pyfunction]
fn decode_handshake<'py>(
    py: Python<'py>,
    data: &[u8],
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>)> {
    let fixed: &[u8; wire::HANDSHAKE_LEN] = data.try_into().map_err(|_| {
        PyValueError::new_err(format!(
            "handshake must be exactly {} bytes, got {}",
            wire::HANDSHAKE_LEN,
            data.len()
        ))
    })?;
    let hs = wire::decode_handshake(fixed).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((PyBytes::new(py, &hs.info_hash), PyBytes::new(py, &hs.peer_id)))
}

#[pyfunction]
fn encode_keepalive(py: Python<'_>) -> Bound<'_, PyBytes> {
    frame(py, &wire::Message::KeepAlive)
}

#[pyfunction]
fn encode_choke(py: Python<'_>) -> Bound<'_, PyBytes> {
    frame(py, &wire::Message::Choke)
}

#[pyfunction]
fn encode_unchoke(py: Python<'_>) -> Bound<'_, PyBytes> {
    frame(py, &wire::Message::Unchoke)
}

#[pyfunction]
fn encode_interested(py: Python<'_>) -> Bound<'_, PyBytes> {
    frame(py, &wire::Message::Interested)
}

#[pyfunction]
fn encode_not_interested(py: Python<'_>) -> Bound<'_, PyBytes> {
    frame(py, &wire::Message::NotInterested)
}

#[pyfunction]
fn encode_request(py: Python<'_>, index: u32, begin: u32, length: u32) -> Bound<'_, PyBytes> {
    frame(py, &wire::Message::Request { index, begin, length })
}

#[pyfunction]
fn encode_piece<'py>(
    py: Python<'py>,
    index: u32,
    begin: u32,
    data: &[u8],
) -> Bound<'py, PyBytes> {
    frame(py, &wire::Message::Piece { index, begin, data: data.to_vec() })
}

/// Parks `tasks` cooperative tasks at once and reports the marginal
/// resident memory per task. Releases the GIL while it runs.
#[pyfunction]
#[pyo3(signature = (tasks=100_000))]
fn bench_spawn(py: Python<'_>, tasks: usize) -> PyResult<Bound<'_, PyDict>> {
    let r = py
        .detach(|| hekate_core::bench_spawn(tasks))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("tasks", r.tasks)?;
    d.set_item("bytes_per_task", r.bytes_per_task)?;
    d.set_item("peak_rss", r.peak_rss)?;
    d.set_item("elapsed_s", r.elapsed.as_secs_f64())?;
    d.set_item("spawns_per_sec", r.spawns_per_sec)?;
    Ok(d)
}

/// Ping-pong context-switch rate across `pairs` task pairs. Releases the
/// GIL while it runs.
#[pyfunction]
#[pyo3(signature = (pairs=1, iters=1_000_000))]
fn bench_switch(py: Python<'_>, pairs: usize, iters: u64) -> PyResult<Bound<'_, PyDict>> {
    let r = py
        .detach(|| hekate_core::bench_switch(pairs, iters))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("switches", r.switches)?;
    d.set_item("elapsed_s", r.elapsed.as_secs_f64())?;
    d.set_item("switches_per_sec", r.switches_per_sec)?;
    Ok(d)
}

/// Runs an in-process swarm against an in-process seeder, verifying every
/// payload byte, and returns the run's counters. Releases the GIL while
/// the swarm runs.
#[pyfunction]
#[pyo3(signature = (
    peers=10, chunks_per_peer=32, chunk_length=16_384, pipeline=4, pattern="random",
    seed=0, rate_limit=None, content_len=1_048_576, piece_length=262_144,
    unchoke_fraction=0.10, choke_interval_ms=100, idle_timeout_ms=15_000, time_limit_s=60.0
))]
#[allow(clippy::too_many_arguments)]
fn run_local_swarm<'py>(
    py: Python<'py>,
    peers: usize,
    chunks_per_peer: usize,
    chunk_length: u32,
    pipeline: usize,
    pattern: &str,
    seed: u64,
    rate_limit: Option<u64>,
    content_len: usize,
    piece_length: u32,
    unchoke_fraction: f64,
    choke_interval_ms: u64,
    idle_timeout_ms: u64,
    time_limit_s: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let pattern = match pattern {
        "random" => RequestPattern::RandomChunks(seed),
        "sequential" => RequestPattern::Sequential,
        other => {
            return Err(PyValueError::new_err(format!(
                "pattern must be \"random\" or \"sequential\", got {other:?}"
            )))
        }
    };
    let opts = SimOptions {
        peers: SimPeerConfig {
            peer_count: peers,
            pattern,
            rate_limit,
            chunk_length,
            chunks_per_peer,
            pipeline,
            keepalive_interval: Duration::from_secs(2),
            time_limit: Duration::from_secs_f64(time_limit_s),
        },
        content_seed: seed,
        content_len,
        piece_length,
        choke_interval: Duration::from_millis(choke_interval_ms),
        unchoke_fraction,
        idle_timeout: Duration::from_millis(idle_timeout_ms),
    };
    let summary = py
        .detach(|| sim_local(&opts))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    summary_dict(py, &summary)
}

fn seeder_stats_dict<'py>(py: Python<'py>, s: &SeederStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("sessions_opened", s.sessions_opened)?;
    d.set_item("sessions_closed", s.sessions_closed)?;
    d.set_item("active_sessions", s.active_sessions)?;
    d.set_item("requests_served", s.requests_served)?;
    d.set_item("requests_dropped_choked", s.requests_dropped_choked)?;
    d.set_item("idle_disconnects", s.idle_disconnects)?;
    d.set_item("bytes_sent", s.bytes_sent)?;
    d.set_item("choke_ticks", s.choke_ticks)?;
    Ok(d)
}

fn runtime_stats_dict<'py>(py: Python<'py>, s: &RuntimeStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tasks_spawned", s.tasks_spawned)?;
    d.set_item("context_switches", s.context_switches)?;
    d.set_item("pool_dispatches", s.pool_dispatches)?;
    d.set_item("yields", s.yields)?;
    d.set_item("io_registrations", s.io_registrations)?;
    d.set_item("live_tasks", s.live_tasks)?;
    Ok(d)
}

fn summary_dict<'py>(py: Python<'py>, s: &SimSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("peers", s.peers)?;
    d.set_item("peers_completed", s.peers_completed)?;
    d.set_item("payload_bytes", s.payload_bytes)?;
    d.set_item("received_bytes", s.received_bytes)?;
    d.set_item("duplicate_pieces", s.duplicate_pieces)?;
    d.set_item("requests_sent", s.requests_sent)?;
    d.set_item("keepalives_sent", s.keepalives_sent)?;
    d.set_item("timed_out", s.timed_out)?;
    d.set_item("elapsed_s", s.elapsed.as_secs_f64())?;
    d.set_item("aggregate_throughput", s.aggregate_throughput())?;
    if let Some(ref stats) = s.seeder {
        d.set_item("seeder", seeder_stats_dict(py, stats)?)?;
    }
    if let Some(fair) = s.fairness {
        let f = PyDict::new(py);
        f.set_item("bound_violations", fair.bound_violations)?;
        f.set_item("worst_wait_ticks", fair.worst_wait_ticks)?;
        f.set_item("never_unchoked", fair.never_unchoked)?;
        d.set_item("fairness", f)?;
    }
    d.set_item("runtime", runtime_stats_dict(py, &s.runtime)?)?;
    Ok(d)
}

#[pymodule]
fn hekate_mini(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ContentStore>()?;
    m.add_class::<Seeder>()?;
    m.add_class::<FrameReader>()?;
    m.add_function(wrap_pyfunction!(start_seeder, m)?)?;
    m.add_function(wrap_pyfunction!(encode_handshake, m)?)?;
    m.add_function(wrap_pyfunction!(decode_handshake, m)?)?;
    m.add_function(wrap_pyfunction!(encode_keepalive, m)?)?;
    m.add_function(wrap_pyfunction!(encode_choke, m)?)?;
    m.add_function(wrap_pyfunction!(encode_unchoke, m)?)?;
    m.add_function(wrap_pyfunction!(encode_interested, m)?)?;
    m.add_function(wrap_pyfunction!(encode_not_interested, m)?)?;
    m.add_function(wrap_pyfunction!(encode_request, m)?)?;
    m.add_function(wrap_pyfunction!(encode_piece, m)?)?;
    m.add_function(wrap_pyfunction!(bench_spawn, m)?)?;
    m.add_function(wrap_pyfunction!(bench_switch, m)?)?;
    m.add_function(wrap_pyfunction!(run_local_swarm, m)?)?;
    m.add("PROTOCOL_TAG", PyBytes::new(m.py(), wire::PROTOCOL_TAG))?;
    m.add("HANDSHAKE_LEN", wire::HANDSHAKE_LEN)?;
    m.add("MAX_REQUEST_LEN", wire::MAX_REQUEST_LEN)?;
    m.add("MAX_FRAME_LEN", wire::MAX_FRAME_LEN)?;
    Ok(())
}
