//! Benchmarks and the swarm load generator used to exercise the seeder
//! end to end.

use std::collections::VecDeque;
use std::net::{SocketAddr, TcpListener};
use std::os::fd::{IntoRawFd, RawFd};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::RtError;
use crate::io::{read_lazy, set_nonblocking, write_all, ReadOutcome};
use crate::runtime::{spawn, yield_now, Runtime, RuntimeStats};
use crate::seeder::wire::{
    self, encode_handshake, encode_to_vec, FrameDecoder, Message, HANDSHAKE_LEN,
};
use crate::seeder::{spawn_seeder, SeederConfig, SeederStats};
use crate::store::{ContentStore, StoreError};
use crate::sync::{sleep, with_timeout, CondVar, TimeoutOutcome};

fn page_size() -> u64 {
    unsafe { libc::sysconf(libc::_SC_PAGESIZE) as u64 }
}

/// Current resident set size in bytes, from `/proc/self/statm`.
fn resident_bytes() -> u64 {
    let statm = std::fs::read_to_string("/proc/self/statm").unwrap_or_default();
    let pages: u64 = statm
        .split_whitespace()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    pages * page_size()
}

/// Peak resident set size in bytes, from `/proc/self/status` (VmHWM).
fn peak_rss_bytes() -> u64 {
    let status = std::fs::read_to_string("/proc/self/status").unwrap_or_default();
    status
        .lines()
        .find_map(|line| line.strip_prefix("VmHWM:"))
        .and_then(|rest| rest.trim().split_whitespace().next())
        .and_then(|v| v.parse::<u64>().ok())
        .unwrap_or(0)
        * 1024
}

#[derive(Debug, Clone, Copy)]
pub struct SpawnBench {
    pub tasks: usize,
    /// Marginal resident bytes per task: the RSS slope between the first
    /// and second half of the spawns, with every task parked.
    pub bytes_per_task: u64,
    pub peak_rss: u64,
    pub elapsed: Duration,
    pub spawns_per_sec: f64,
}

impl SpawnBench {
    pub fn render(&self) -> String {
        format!(
            "tasks={}\nbytes_per_task={}\npeak_rss={}\nelapsed_ms={}\nspawns_per_sec={:.0}\n",
            self.tasks,
            self.bytes_per_task,
            self.peak_rss,
            self.elapsed.as_millis(),
            self.spawns_per_sec,
        )
    }
}

/// Spawns `tasks` parked tasks and reports the marginal memory cost of one.
///
/// The first half warms every allocator pool and table; the slope over the
/// second half is what an additional task actually costs.
pub fn bench_spawn(tasks: usize) -> Result<SpawnBench, RtError> {
    let rt = Runtime::new();
    let gate = Arc::new(CondVar::new());
    let result = Arc::new(Mutex::new(None));
    let result2 = result.clone();
    let gate2 = gate.clone();

    rt.spawn(async move {
        let spawn_batch = |count: usize| -> Result<(), RtError> {
            for _ in 0..count {
                let gate = gate2.clone();
                spawn(async move { gate.wait().await })?;
            }
            Ok(())
        };
        let first = tasks / 2;
        let second = tasks - first;
        let started = Instant::now();
        spawn_batch(first)?;
        // One yield runs every freshly spawned task to its park point.
        yield_now().await?;
        let rss_half = resident_bytes();
        spawn_batch(second)?;
        yield_now().await?;
        let rss_full = resident_bytes();
        let elapsed = started.elapsed();

        let grew = rss_full.saturating_sub(rss_half);
        *result2.lock() = Some(SpawnBench {
            tasks,
            bytes_per_task: if second == 0 { 0 } else { grew / second as u64 },
            peak_rss: 0,
            elapsed,
            spawns_per_sec: if tasks == 0 {
                0.0
            } else {
                tasks as f64 / elapsed.as_secs_f64()
            },
        });
        gate2.broadcast()?;
        Ok::<(), RtError>(())
    })?;
    rt.run()?;
    let mut bench = result.lock().take().expect("driver task always reports");
    bench.peak_rss = peak_rss_bytes();
    Ok(bench)
}

#[derive(Debug, Clone, Copy)]
pub struct SwitchBench {
    pub switches: u64,
    pub elapsed: Duration,
    pub switches_per_sec: f64,
}

impl SwitchBench {
    pub fn render(&self) -> String {
        format!(
            "switches={}\nelapsed_ms={}\nswitches_per_sec={:.0}\n",
            self.switches,
            self.elapsed.as_millis(),
            self.switches_per_sec,
        )
    }
}

/// `pairs` task pairs ping-pong via bare yields, `iters` yields per task,
/// and the measured context-switch rate is reported.
pub fn bench_switch(pairs: usize, iters: u64) -> Result<SwitchBench, RtError> {
    let rt = Runtime::new();
    for _ in 0..pairs * 2 {
        rt.spawn(async move {
            for _ in 0..iters {
                yield_now().await?;
            }
            Ok::<(), RtError>(())
        })?;
    }
    let started = Instant::now();
    rt.run()?;
    let elapsed = started.elapsed();
    let switches = rt.stats().context_switches;
    Ok(SwitchBench {
        switches,
        elapsed,
        switches_per_sec: switches as f64 / elapsed.as_secs_f64().max(f64::MIN_POSITIVE),
    })
}

/// The order in which a simulated peer sweeps the content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestPattern {
    /// Ascending offset order, identical for every peer.
    Sequential,
    /// A full sweep shuffled per peer; deterministic in (seed, peer index).
    RandomChunks(u64),
}

#[derive(Debug, Clone)]
pub struct SimPeerConfig {
    pub peer_count: usize,
    pub pattern: RequestPattern,
    /// Per-peer ceiling on received payload bytes per second.
    pub rate_limit: Option<u64>,
    /// Request size; capped by protocol at [`wire::MAX_REQUEST_LEN`].
    pub chunk_length: u32,
    /// Chunk requests per peer; 0 means the full content sweep.
    pub chunks_per_peer: usize,
    /// Requests kept in flight per peer.
    pub pipeline: usize,
    /// How often an otherwise silent peer sends a keep-alive.
    pub keepalive_interval: Duration,
    /// Wall-clock cap; the run winds down cleanly if it trips.
    pub time_limit: Duration,
}

impl Default for SimPeerConfig {
    fn default() -> Self {
        SimPeerConfig {
            peer_count: 8,
            pattern: RequestPattern::RandomChunks(42),
            rate_limit: None,
            chunk_length: 16 * 1024,
            chunks_per_peer: 0,
            pipeline: 4,
            keepalive_interval: Duration::from_secs(5),
            time_limit: Duration::from_secs(60),
        }
    }
}

/// Options for [`sim_local`]: a swarm against an in-process seeder.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub peers: SimPeerConfig,
    pub content_seed: u64,
    pub content_len: usize,
    pub piece_length: u32,
    pub choke_interval: Duration,
    pub unchoke_fraction: f64,
    pub idle_timeout: Duration,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            peers: SimPeerConfig::default(),
            content_seed: 1,
            content_len: 1 << 20,
            piece_length: 1 << 18,
            choke_interval: Duration::from_millis(100),
            unchoke_fraction: 0.10,
            idle_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("payload mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rt(#[from] RtError),
    #[error("invalid simulation options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy)]
pub struct SimSummary {
    pub peers: usize,
    pub peers_completed: usize,
    /// Unique plan payload received across all peers.
    pub payload_bytes: u64,
    /// All piece payload received, duplicates included.
    pub received_bytes: u64,
    pub duplicate_pieces: u64,
    pub requests_sent: u64,
    pub keepalives_sent: u64,
    pub timed_out: bool,
    pub elapsed: Duration,
    /// Present only when the seeder ran in this process.
    pub seeder: Option<SeederStats>,
    /// Present only when the seeder ran in this process, where its choke
    /// window can be observed while the swarm runs.
    pub fairness: Option<ChokeFairness>,
    pub runtime: RuntimeStats,
}

/// Choke-window observations sampled live during a local sim.
#[derive(Debug, Clone, Copy)]
pub struct ChokeFairness {
    /// Samples at which the unchoked count exceeded the quota. The window
    /// re-establishes the bound synchronously on every membership change,
    /// so any nonzero value is a bug.
    pub bound_violations: u64,
    /// Longest wait, in choke ticks, between a session joining the ring and
    /// its first upload slot.
    pub worst_wait_ticks: u64,
    /// Sessions that disconnected without ever being unchoked.
    pub never_unchoked: u64,
}

impl SimSummary {
    /// Payload bytes per second across the whole swarm.
    pub fn aggregate_throughput(&self) -> f64 {
        self.payload_bytes as f64 / self.elapsed.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "peers={}\npeers_completed={}\npayload_bytes={}\nreceived_bytes={}\nduplicate_pieces={}\nrequests_sent={}\nkeepalives_sent={}\ntimed_out={}\nelapsed_ms={}\naggregate_throughput={:.0}\n",
            self.peers,
            self.peers_completed,
            self.payload_bytes,
            self.received_bytes,
            self.duplicate_pieces,
            self.requests_sent,
            self.keepalives_sent,
            self.timed_out,
            self.elapsed.as_millis(),
            self.aggregate_throughput(),
        );
        if let Some(seeder) = &self.seeder {
            out.push_str(&seeder.render());
        }
        if let Some(fair) = &self.fairness {
            out.push_str(&format!(
                "unchoke_bound_violations={}\nworst_unchoke_wait_ticks={}\nnever_unchoked={}\n",
                fair.bound_violations, fair.worst_wait_ticks, fair.never_unchoked,
            ));
        }
        out.push_str(&self.runtime.render());
        out
    }
}

/// Deterministic pseudo-random content for a given seed.
pub fn generate_content(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; len];
    rng.fill_bytes(&mut data);
    data
}

/// Every (piece, begin, length) request needed to sweep the whole content
/// once, in ascending order.
fn chunk_plan(content_len: u64, piece_length: u32, chunk_length: u32) -> Vec<(u32, u32, u32)> {
    let mut plan = Vec::new();
    let mut offset = 0u64;
    while offset < content_len {
        let piece = (offset / piece_length as u64) as u32;
        let begin = (offset % piece_length as u64) as u32;
        let piece_end = ((piece as u64 + 1) * piece_length as u64).min(content_len);
        let len = (chunk_length as u64).min(piece_end - offset) as u32;
        plan.push((piece, begin, len));
        offset += len as u64;
    }
    plan
}

/// One peer's request order, truncated to its quota. Deterministic in
/// (pattern, peer index).
fn peer_plan(
    pattern: RequestPattern,
    peer_idx: usize,
    full: &[(u32, u32, u32)],
    take: usize,
) -> Vec<(u32, u32, u32)> {
    let mut plan = full.to_vec();
    if let RequestPattern::RandomChunks(seed) = pattern {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(peer_idx as u64));
        plan.shuffle(&mut rng);
    }
    if take > 0 && take < plan.len() {
        plan.truncate(take);
    }
    plan
}

#[derive(Default)]
struct ClientAgg {
    payload_bytes: u64,
    received_bytes: u64,
    duplicate_pieces: u64,
    requests_sent: u64,
    keepalives_sent: u64,
    completed: usize,
    mismatches: Vec<String>,
    failures: Vec<String>,
}

fn check_config(config: &SimPeerConfig) -> Result<(), SimError> {
    if config.peer_count == 0 {
        return Err(SimError::Options("at least one peer".into()));
    }
    if config.chunk_length == 0 || config.chunk_length > wire::MAX_REQUEST_LEN {
        return Err(SimError::Options(format!(
            "chunk_length must be in 1..={}",
            wire::MAX_REQUEST_LEN
        )));
    }
    if config.pipeline == 0 {
        return Err(SimError::Options("pipeline must be at least 1".into()));
    }
    Ok(())
}

/// Spawns the client tasks plus a watchdog, and returns the shared pieces
/// the caller's driver task needs.
#[allow(clippy::type_complexity)]
fn spawn_swarm(
    rt: &Runtime,
    addr: SocketAddr,
    store: &Arc<ContentStore>,
    config: &SimPeerConfig,
    on_timeout: impl Fn() + Send + Sync + 'static,
) -> Result<
    (
        Vec<crate::runtime::TaskHandle>,
        Arc<Mutex<ClientAgg>>,
        Arc<AtomicBool>,
        Arc<AtomicBool>,
    ),
    SimError,
> {
    let full_plan = Arc::new(chunk_plan(
        store.len() as u64,
        store.piece_length(),
        config.chunk_length,
    ));
    let agg = Arc::new(Mutex::new(ClientAgg::default()));
    let done = Arc::new(AtomicBool::new(false));
    let timed_out = Arc::new(AtomicBool::new(false));

    let mut clients = Vec::with_capacity(config.peer_count);
    for peer_idx in 0..config.peer_count {
        let plan = peer_plan(config.pattern, peer_idx, &full_plan, config.chunks_per_peer);
        let store = store.clone();
        let agg = agg.clone();
        let config = config.clone();
        clients.push(rt.spawn(async move {
            let outcome = client_task(addr, store, plan, &config).await;
            let mut agg = agg.lock();
            match outcome {
                Ok(stats) => {
                    agg.payload_bytes += stats.payload_bytes;
                    agg.received_bytes += stats.received_bytes;
                    agg.duplicate_pieces += stats.duplicate_pieces;
                    agg.requests_sent += stats.requests_sent;
                    agg.keepalives_sent += stats.keepalives_sent;
                    agg.completed += 1;
                    Ok(())
                }
                Err(ClientError::Mismatch(m)) => {
                    let m = format!("peer {peer_idx}: {m}");
                    agg.mismatches.push(m.clone());
                    Err(std::io::Error::other(m))
                }
                Err(ClientError::Rt(e)) => {
                    agg.failures.push(format!("peer {peer_idx}: {e}"));
                    Err(std::io::Error::other(e.to_string()))
                }
                Err(ClientError::Disconnected(m)) => {
                    agg.failures.push(format!("peer {peer_idx}: {m}"));
                    Err(std::io::Error::other(m))
                }
            }
        })?);
    }

    // Watchdog in slices so a finished run is not pinned open for the
    // remainder of the time limit.
    let (wd_done, wd_timed) = (done.clone(), timed_out.clone());
    let limit = config.time_limit;
    rt.spawn(async move {
        let started = Instant::now();
        loop {
            sleep(Duration::from_millis(50)).await?;
            if wd_done.load(Ordering::SeqCst) {
                return Ok::<(), RtError>(());
            }
            if started.elapsed() > limit {
                wd_timed.store(true, Ordering::SeqCst);
                on_timeout();
                return Ok(());
            }
        }
    })?;

    Ok((clients, agg, done, timed_out))
}

fn finish_summary(
    rt: &Runtime,
    config: &SimPeerConfig,
    agg: Arc<Mutex<ClientAgg>>,
    timed_out: &AtomicBool,
    elapsed: Duration,
    seeder: Option<SeederStats>,
    fairness: Option<ChokeFairness>,
) -> Result<SimSummary, SimError> {
    let agg = Arc::try_unwrap(agg)
        .map_err(|_| SimError::Options("aggregation still shared".into()))?
        .into_inner();
    if let Some(first) = agg.mismatches.first() {
        return Err(SimError::Mismatch(first.clone()));
    }
    for failure in &agg.failures {
        log::warn!("peer failed: {failure}");
    }
    Ok(SimSummary {
        peers: config.peer_count,
        peers_completed: agg.completed,
        payload_bytes: agg.payload_bytes,
        received_bytes: agg.received_bytes,
        duplicate_pieces: agg.duplicate_pieces,
        requests_sent: agg.requests_sent,
        keepalives_sent: agg.keepalives_sent,
        timed_out: timed_out.load(Ordering::SeqCst),
        elapsed,
        seeder,
        fairness,
        runtime: rt.stats(),
    })
}

/// Drives a swarm of protocol-conformant peers against a seeder at `addr`,
/// verifying every payload byte against `store` (which must hold the same
/// content and piece length the seeder serves). Runs on its own runtime.
///
/// Any payload mismatch is fatal; peers that fail for other reasons (the
/// seeder went away, the time limit tripped) are reported via
/// `peers_completed` falling short of `peers`.
pub fn sim_peers(
    config: &SimPeerConfig,
    addr: SocketAddr,
    store: Arc<ContentStore>,
) -> Result<SimSummary, SimError> {
    check_config(config)?;
    let rt = Runtime::new();
    let (clients, agg, done, timed_out) = spawn_swarm(&rt, addr, &store, config, || {})?;

    let started = Instant::now();
    let elapsed_cell = Arc::new(Mutex::new(Duration::ZERO));
    let (elapsed_out, driver_done) = (elapsed_cell.clone(), done.clone());
    rt.spawn(async move {
        for c in clients {
            let _ = c.join().await;
        }
        *elapsed_out.lock() = started.elapsed();
        driver_done.store(true, Ordering::SeqCst);
        Ok::<(), RtError>(())
    })?;
    rt.run()?;

    let elapsed = *elapsed_cell.lock();
    finish_summary(&rt, config, agg, &timed_out, elapsed, None, None)
}

/// [`sim_peers`] against an in-process seeder sharing the same runtime:
/// deterministic content is generated from `content_seed`, served, swept,
/// and verified, and the seeder's own counters land in the summary.
pub fn sim_local(opts: &SimOptions) -> Result<SimSummary, SimError> {
    check_config(&opts.peers)?;
    let content = generate_content(opts.content_seed, opts.content_len);
    let store = Arc::new(ContentStore::from_bytes(&content, opts.piece_length)?);
    drop(content);

    let rt = Runtime::new();
    let listener = TcpListener::bind("127.0.0.1:0").map_err(RtError::Io)?;
    let seeder = spawn_seeder(
        &rt,
        listener,
        store.clone(),
        SeederConfig {
            choke_interval: opts.choke_interval,
            unchoke_fraction: opts.unchoke_fraction,
            idle_timeout: opts.idle_timeout,
            ..SeederConfig::default()
        },
    )?;
    let addr = SocketAddr::from(([127, 0, 0, 1], seeder.port()));

    let stop_seeder = seeder.clone();
    let (clients, agg, done, timed_out) =
        spawn_swarm(&rt, addr, &store, &opts.peers, move || stop_seeder.stop())?;

    // Sample the choke window a few times per tick: the unchoked count must
    // never exceed the quota, no matter where between ticks we look.
    let violations = Arc::new(AtomicU64::new(0));
    let (sampler_seeder, sampler_done, sampler_violations) =
        (seeder.clone(), done.clone(), violations.clone());
    let sample_every = (opts.choke_interval / 4).max(Duration::from_millis(5));
    rt.spawn(async move {
        while !sampler_done.load(Ordering::SeqCst) {
            if sampler_seeder.unchoked_now() > sampler_seeder.quota_now() {
                sampler_violations.fetch_add(1, Ordering::Relaxed);
            }
            sleep(sample_every).await?;
        }
        Ok::<(), RtError>(())
    })?;

    let started = Instant::now();
    let elapsed_cell = Arc::new(Mutex::new(Duration::ZERO));
    let (elapsed_out, driver_done, driver_seeder) =
        (elapsed_cell.clone(), done.clone(), seeder.clone());
    rt.spawn(async move {
        for c in clients {
            let _ = c.join().await;
        }
        *elapsed_out.lock() = started.elapsed();
        driver_done.store(true, Ordering::SeqCst);
        driver_seeder.stop();
        driver_seeder.accept_task().join().await?;
        Ok::<(), RtError>(())
    })?;
    rt.run()?;

    // The loop ran on this thread, so loop-confined state is reachable now
    // that it has exited.
    let fairness = ChokeFairness {
        bound_violations: violations.load(Ordering::Relaxed),
        worst_wait_ticks: seeder.worst_unchoke_wait(),
        never_unchoked: seeder.sessions_never_unchoked(),
    };
    let elapsed = *elapsed_cell.lock();
    finish_summary(
        &rt,
        &opts.peers,
        agg,
        &timed_out,
        elapsed,
        Some(seeder.stats()),
        Some(fairness),
    )
}

struct ClientStats {
    payload_bytes: u64,
    received_bytes: u64,
    duplicate_pieces: u64,
    requests_sent: u64,
    keepalives_sent: u64,
}

enum ClientError {
    Mismatch(String),
    Disconnected(String),
    Rt(RtError),
}

impl From<RtError> for ClientError {
    fn from(e: RtError) -> Self {
        ClientError::Rt(e)
    }
}

async fn client_handshake(
    fd: RawFd,
    store: &ContentStore,
    config: &SimPeerConfig,
) -> Result<(), ClientError> {
    let ours = encode_handshake(&store.info_hash(), b"-HK0001-leecher00000");
    write_all(fd, &ours).await?;
    let mut buf = Vec::with_capacity(HANDSHAKE_LEN);
    while buf.len() < HANDSHAKE_LEN {
        let needed = HANDSHAKE_LEN - buf.len();
        let out = with_timeout(config.keepalive_interval.max(Duration::from_secs(1)), |token| {
            async move { read_lazy(fd, needed, Some(&token)).await }
        })
        .await?;
        match out {
            TimeoutOutcome::Completed(Ok(ReadOutcome::Data(d))) => buf.extend_from_slice(&d),
            other => {
                return Err(ClientError::Disconnected(format!(
                    "handshake stalled: {other:?}"
                )))
            }
        }
    }
    let bytes: &[u8; HANDSHAKE_LEN] = buf[..HANDSHAKE_LEN].try_into().expect("sized above");
    let hs = wire::decode_handshake(bytes)
        .map_err(|e| ClientError::Disconnected(format!("bad handshake: {e}")))?;
    if hs.info_hash != store.info_hash() {
        return Err(ClientError::Mismatch("info hash differs".into()));
    }
    Ok(())
}

async fn client_task(
    addr: SocketAddr,
    store: Arc<ContentStore>,
    plan: Vec<(u32, u32, u32)>,
    config: &SimPeerConfig,
) -> Result<ClientStats, ClientError> {
    let stream = std::net::TcpStream::connect(addr).map_err(|e| ClientError::Rt(RtError::Io(e)))?;
    let fd = stream.into_raw_fd();
    let result = client_session(fd, &store, plan, config).await;
    unsafe {
        libc::close(fd);
    }
    result
}

async fn client_session(
    fd: RawFd,
    store: &ContentStore,
    plan: Vec<(u32, u32, u32)>,
    config: &SimPeerConfig,
) -> Result<ClientStats, ClientError> {
    set_nonblocking(fd).map_err(|e| ClientError::Rt(RtError::Io(e)))?;
    client_handshake(fd, store, config).await?;
    write_all(fd, &encode_to_vec(&Message::Interested)).await?;

    let mut stats = ClientStats {
        payload_bytes: 0,
        received_bytes: 0,
        duplicate_pieces: 0,
        requests_sent: 0,
        keepalives_sent: 0,
    };
    let mut plan: VecDeque<(u32, u32, u32)> = plan.into();
    let mut outstanding: Vec<(u32, u32, u32)> = Vec::new();
    let mut choked = true;
    let mut dec = FrameDecoder::new();
    let started = Instant::now();
    let mut requested_bytes = 0u64;

    while !(plan.is_empty() && outstanding.is_empty()) {
        // A conformant peer requests only while unchoked. Requests are what
        // the rate limit paces: issuing is deferred until the bytes already
        // asked for fit under the limit.
        if !choked {
            while outstanding.len() < config.pipeline && !plan.is_empty() {
                if let Some(rate) = config.rate_limit {
                    let due = Duration::from_secs_f64(requested_bytes as f64 / rate as f64);
                    let ahead = due.saturating_sub(started.elapsed());
                    if !ahead.is_zero() {
                        if outstanding.is_empty() {
                            sleep(ahead).await?;
                        } else {
                            // Let what is in flight land first.
                            break;
                        }
                    }
                }
                let (index, begin, length) = plan.pop_front().expect("checked non-empty");
                write_all(
                    fd,
                    &encode_to_vec(&Message::Request {
                        index,
                        begin,
                        length,
                    }),
                )
                .await?;
                stats.requests_sent += 1;
                requested_bytes += length as u64;
                outstanding.push((index, begin, length));
            }
        }
        let out = with_timeout(config.keepalive_interval, |token| async move {
            read_lazy(fd, 64 * 1024, Some(&token)).await
        })
        .await?;
        let data = match out {
            TimeoutOutcome::TimedOut => {
                write_all(fd, &encode_to_vec(&Message::KeepAlive)).await?;
                stats.keepalives_sent += 1;
                continue;
            }
            TimeoutOutcome::Completed(Ok(ReadOutcome::Data(d))) => d,
            TimeoutOutcome::Completed(Ok(_)) => {
                return Err(ClientError::Disconnected(format!(
                    "server closed with {} chunks outstanding and {} planned",
                    outstanding.len(),
                    plan.len()
                )));
            }
            TimeoutOutcome::Completed(Err(e)) => return Err(e.into()),
        };
        dec.push(&data);
        loop {
            let frame = dec
                .next_frame()
                .map_err(|e| ClientError::Disconnected(format!("protocol error: {e}")))?;
            let Some(msg) = frame else { break };
            match msg {
                Message::Unchoke => choked = false,
                Message::Choke => {
                    choked = true;
                    // The server discards queued work when it chokes us;
                    // everything in flight must be asked for again.
                    for req in outstanding.drain(..).rev() {
                        plan.push_front(req);
                    }
                }
                Message::Piece { index, begin, data } => {
                    stats.received_bytes += data.len() as u64;
                    let offset = index as u64 * store.piece_length() as u64 + begin as u64;
                    let expected = store.slice(offset, data.len());
                    if expected != Some(&data[..]) {
                        return Err(ClientError::Mismatch(format!(
                            "piece {index} begin {begin} len {} does not match source",
                            data.len()
                        )));
                    }
                    let key = (index, begin, data.len() as u32);
                    if let Some(pos) = outstanding.iter().position(|r| *r == key) {
                        outstanding.swap_remove(pos);
                        stats.payload_bytes += data.len() as u64;
                    } else {
                        stats.duplicate_pieces += 1;
                    }
                }
                Message::KeepAlive
                | Message::Interested
                | Message::NotInterested
                | Message::Request { .. } => {}
            }
        }
    }
    Ok(stats)
}
