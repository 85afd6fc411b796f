//! A miniature content seeder: one cooperative task per connection, a
//! rotating choke window, timeout-guarded reads, and the hybrid disk path
//! for piece payloads.

pub mod choke;
mod session;
pub mod wire;

pub use choke::{ChokeManager, ChokeTarget, SessionId};

use std::collections::HashMap;
use std::net::TcpListener;
use std::os::fd::{AsRawFd, RawFd};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::error::RtError;
use crate::hybrid::{OsResidency, ResidencyOracle};
use crate::io::{io_wait, IoDirection, IoOutcome};
use crate::loopcell::LoopCell;
use crate::runtime::{spawn, Runtime, TaskHandle};
use crate::store::ContentStore;
use crate::sync::sleep;

use session::PeerSession;

#[derive(Clone)]
pub struct SeederConfig {
    /// Identity sent in our half of the handshake.
    pub peer_id: [u8; 20],
    /// How often the unchoke window rotates.
    pub choke_interval: Duration,
    /// Fraction of connected peers unchoked at once (at least one).
    pub unchoke_fraction: f64,
    /// A peer silent for this long is disconnected.
    pub idle_timeout: Duration,
    /// A fresh connection must complete the handshake within this window.
    pub handshake_timeout: Duration,
}

impl Default for SeederConfig {
    fn default() -> Self {
        SeederConfig {
            peer_id: *b"-HK0001-seeder000000",
            choke_interval: Duration::from_secs(1),
            unchoke_fraction: 0.10,
            idle_timeout: Duration::from_secs(30),
            handshake_timeout: Duration::from_secs(3),
        }
    }
}

#[derive(Default)]
pub(crate) struct Counters {
    pub sessions_opened: AtomicU64,
    pub sessions_closed: AtomicU64,
    pub requests_served: AtomicU64,
    pub requests_dropped_choked: AtomicU64,
    pub idle_disconnects: AtomicU64,
    pub bytes_sent: AtomicU64,
    pub choke_ticks: AtomicU64,
}

/// Point-in-time seeder counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeederStats {
    pub sessions_opened: u64,
    pub sessions_closed: u64,
    pub active_sessions: u64,
    pub requests_served: u64,
    pub requests_dropped_choked: u64,
    pub idle_disconnects: u64,
    pub bytes_sent: u64,
    pub choke_ticks: u64,
}

impl SeederStats {
    /// One `key=value` line per counter, stable order.
    pub fn render(&self) -> String {
        format!(
            "sessions_opened={}\nsessions_closed={}\nactive_sessions={}\nrequests_served={}\nrequests_dropped_choked={}\nidle_disconnects={}\nbytes_sent={}\nchoke_ticks={}\n",
            self.sessions_opened,
            self.sessions_closed,
            self.active_sessions,
            self.requests_served,
            self.requests_dropped_choked,
            self.idle_disconnects,
            self.bytes_sent,
            self.choke_ticks,
        )
    }
}

impl std::fmt::Display for SeederStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

pub(crate) struct SessionTable {
    next_id: SessionId,
    entries: HashMap<SessionId, SessionEntry>,
}

pub(crate) struct SessionEntry {
    fd: RawFd,
    task: TaskHandle,
}

impl SessionTable {
    fn new() -> Self {
        SessionTable {
            next_id: 1,
            entries: HashMap::new(),
        }
    }
}

pub(crate) struct SeederShared {
    pub store: Arc<ContentStore>,
    pub config: SeederConfig,
    pub oracle: Arc<dyn ResidencyOracle>,
    pub stop: AtomicBool,
    pub port: u16,
    pub counters: Counters,
    pub sessions: LoopCell<SessionTable>,
    pub mgr: LoopCell<ChokeManager<Arc<PeerSession>>>,
}

/// Control surface over a running seeder. Clonable and thread-safe; `stop`
/// may be called from any thread, including outside the runtime.
#[derive(Clone)]
pub struct SeederHandle {
    shared: Arc<SeederShared>,
    accept_task: TaskHandle,
}

impl SeederHandle {
    pub fn port(&self) -> u16 {
        self.shared.port
    }

    /// Asks the seeder to wind down: stop accepting, shut down every live
    /// session socket, and let the tasks drain. Idempotent.
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // A throwaway connection wakes the accept task if it is parked.
        let addr = std::net::SocketAddr::from(([127, 0, 0, 1], self.shared.port));
        let _ = std::net::TcpStream::connect_timeout(&addr, Duration::from_millis(200));
    }

    /// The accept task's handle, joinable from inside the runtime.
    pub fn accept_task(&self) -> &TaskHandle {
        &self.accept_task
    }

    /// How many sessions the choke window currently unchokes. The window is
    /// loop-confined state, so this is callable only from a task attached to
    /// the seeder's runtime.
    pub fn unchoked_now(&self) -> usize {
        self.shared.mgr.with(|m| m.unchoked_count())
    }

    /// The current unchoke quota (`max(1, ceil(fraction * members))`, 0 when
    /// empty). Same loop-confinement rule as [`Self::unchoked_now`].
    pub fn quota_now(&self) -> usize {
        self.shared.mgr.with(|m| m.quota())
    }

    /// Longest wait, in choke ticks, any session has seen between becoming
    /// interested and its first upload slot. Same loop-confinement rule as
    /// [`Self::unchoked_now`].
    pub fn worst_unchoke_wait(&self) -> u64 {
        self.shared.mgr.with(|m| m.worst_unchoke_wait())
    }

    /// Sessions that closed without ever holding an upload slot. Same
    /// loop-confinement rule as [`Self::unchoked_now`].
    pub fn sessions_never_unchoked(&self) -> u64 {
        self.shared.mgr.with(|m| m.removed_never_unchoked())
    }

    pub fn stats(&self) -> SeederStats {
        let c = &self.shared.counters;
        let opened = c.sessions_opened.load(Ordering::Relaxed);
        let closed = c.sessions_closed.load(Ordering::Relaxed);
        SeederStats {
            sessions_opened: opened,
            sessions_closed: closed,
            active_sessions: opened - closed,
            requests_served: c.requests_served.load(Ordering::Relaxed),
            requests_dropped_choked: c.requests_dropped_choked.load(Ordering::Relaxed),
            idle_disconnects: c.idle_disconnects.load(Ordering::Relaxed),
            bytes_sent: c.bytes_sent.load(Ordering::Relaxed),
            choke_ticks: c.choke_ticks.load(Ordering::Relaxed),
        }
    }
}

/// Starts serving `store` on an already-bound listener, with the kernel
/// residency oracle.
pub fn spawn_seeder(
    rt: &Runtime,
    listener: TcpListener,
    store: Arc<ContentStore>,
    config: SeederConfig,
) -> Result<SeederHandle, RtError> {
    spawn_seeder_with_oracle(rt, listener, store, config, Arc::new(OsResidency))
}

/// Same as [`spawn_seeder`] but with a caller-chosen residency oracle.
pub fn spawn_seeder_with_oracle(
    rt: &Runtime,
    listener: TcpListener,
    store: Arc<ContentStore>,
    config: SeederConfig,
    oracle: Arc<dyn ResidencyOracle>,
) -> Result<SeederHandle, RtError> {
    listener.set_nonblocking(true).map_err(RtError::Io)?;
    let port = listener.local_addr().map_err(RtError::Io)?.port();
    let shared = Arc::new(SeederShared {
        store,
        oracle,
        stop: AtomicBool::new(false),
        port,
        counters: Counters::default(),
        sessions: LoopCell::new(SessionTable::new()),
        mgr: LoopCell::new(ChokeManager::new(config.unchoke_fraction)),
        config,
    });
    let accept_task = rt.spawn(accept_loop(shared.clone(), listener))?;
    Ok(SeederHandle {
        shared,
        accept_task,
    })
}

/// One task per connection: park on the listener, accept everything queued,
/// spawn a session per socket. On stop, shut every session down and join it.
async fn accept_loop(shared: Arc<SeederShared>, listener: TcpListener) -> Result<(), RtError> {
    let lfd = listener.as_raw_fd();
    let ticker = spawn(choke_ticker(shared.clone()))?;

    while !shared.stop.load(Ordering::SeqCst) {
        match io_wait(lfd, IoDirection::In, None).await {
            Ok(IoOutcome::Ready) => {}
            Ok(_) => break,
            Err(e) => {
                log::error!("listener wait failed: {e}");
                break;
            }
        }
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        loop {
            let fd = unsafe {
                libc::accept4(
                    lfd,
                    std::ptr::null_mut(),
                    std::ptr::null_mut(),
                    libc::SOCK_NONBLOCK | libc::SOCK_CLOEXEC,
                )
            };
            if fd < 0 {
                let err = std::io::Error::last_os_error();
                match err.raw_os_error() {
                    Some(libc::EAGAIN) => break,
                    Some(libc::EINTR) => continue,
                    _ => {
                        log::warn!("accept failed: {err}");
                        break;
                    }
                }
            } else {
                let id = shared.sessions.with(|t| {
                    let id = t.next_id;
                    t.next_id += 1;
                    id
                });
                let task = spawn(session::run_session(shared.clone(), id, fd))?;
                shared
                    .sessions
                    .with(|t| t.entries.insert(id, SessionEntry { fd, task }));
            }
        }
    }

    shared.stop.store(true, Ordering::SeqCst);
    // Shut sessions down rather than closing: the descriptors stay valid
    // (no fd reuse underneath live tasks) while every parked read and write
    // wakes with a closed-peer outcome.
    let entries: Vec<(RawFd, TaskHandle)> = shared
        .sessions
        .with(|t| t.entries.values().map(|e| (e.fd, e.task.clone())).collect());
    for (fd, _) in &entries {
        unsafe {
            libc::shutdown(*fd, libc::SHUT_RDWR);
        }
    }
    for (_, task) in entries {
        task.join().await?;
    }
    ticker.join().await?;
    drop(listener);
    Ok(())
}

async fn choke_ticker(shared: Arc<SeederShared>) -> Result<(), RtError> {
    loop {
        sleep(shared.config.choke_interval).await?;
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        shared.mgr.with(|m| m.tick());
        shared.counters.choke_ticks.fetch_add(1, Ordering::Relaxed);
    }
}
