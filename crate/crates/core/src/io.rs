//! Readiness-based descriptor I/O for attached tasks, with blocking
//! fallbacks for detached mode.

use std::future::Future;
use std::net::{IpAddr, ToSocketAddrs};
use std::os::fd::RawFd;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};

use crate::error::RtError;
use crate::runtime::{self, IoSlot, IoWaiter, SchedKind, SuspendReason};
use crate::sync::{AbortToken, RegisterOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoDirection {
    In,
    Out,
}

/// How a readiness wait ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoOutcome {
    /// The descriptor is ready for the requested direction.
    Ready,
    /// The peer hung up or the descriptor errored without becoming ready.
    Closed,
    /// An [`AbortToken`] fired while the wait was registered.
    Aborted,
}

/// How a lazy read ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadOutcome {
    Data(Vec<u8>),
    Eof,
    Aborted,
}

enum WaitState {
    Init,
    Waiting(Arc<IoSlot>),
}

pub struct IoWaitFut<'a> {
    fd: RawFd,
    dir: IoDirection,
    token: Option<&'a AbortToken>,
    state: WaitState,
}

fn fd_is_open(fd: RawFd) -> bool {
    unsafe { libc::fcntl(fd, libc::F_GETFD) != -1 }
}

impl Future for IoWaitFut<'_> {
    type Output = Result<IoOutcome, RtError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if let WaitState::Waiting(slot) = &self.state {
            let result = slot
                .take()
                .expect("readiness wait woken without a delivered outcome");
            return Poll::Ready(result);
        }
        let (fd, dir) = (self.fd, self.dir);
        let token = self.token;
        enum First {
            Immediate(IoOutcome),
            Parked(Arc<IoSlot>),
        }
        let outcome = runtime::with_current(|ctx| {
            if ctx.sched.kind() == SchedKind::ThreadPool {
                return Err(RtError::DetachedModeViolation { op: "io_wait" });
            }
            if !fd_is_open(fd) {
                return Err(RtError::InvalidDescriptor);
            }
            if let Some(tok) = token {
                if let RegisterOutcome::AlreadyFired = tok.register_io(fd, dir) {
                    return Ok(First::Immediate(IoOutcome::Aborted));
                }
            }
            let slot = IoSlot::new();
            let waiter = IoWaiter {
                task: ctx.task,
                slot: slot.clone(),
                token: token.cloned(),
            };
            match ctx.shared.core.lock().reactor.register_io(fd, dir, waiter) {
                Ok(()) => {
                    ctx.shared
                        .stats
                        .io_registrations
                        .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    ctx.action = Some(runtime::Action::Park(SuspendReason::Io));
                    Ok(First::Parked(slot))
                }
                Err(e) => {
                    // The token must not keep pointing at someone else's wait.
                    if let Some(tok) = token {
                        tok.clear_io();
                    }
                    Err(e)
                }
            }
        });
        match outcome {
            Err(e) | Ok(Err(e)) => Poll::Ready(Err(e)),
            Ok(Ok(First::Immediate(o))) => Poll::Ready(Ok(o)),
            Ok(Ok(First::Parked(slot))) => {
                self.state = WaitState::Waiting(slot);
                Poll::Pending
            }
        }
    }
}

/// Suspends until `fd` is ready for `dir`, the peer closes, or `token`
/// fires. Attached mode only; one waiter per descriptor and direction.
///
/// The descriptor is validity-checked at registration, and a token that
/// already fired aborts the wait before it parks.
pub fn io_wait(fd: RawFd, dir: IoDirection, token: Option<&AbortToken>) -> IoWaitFut<'_> {
    IoWaitFut {
        fd,
        dir,
        token,
        state: WaitState::Init,
    }
}

fn alloc_hint(len: usize) -> Result<(), RtError> {
    let shared = runtime::current_shared()?;
    let probe = shared.alloc_probe.lock();
    if let Some(p) = probe.as_ref() {
        p(len);
    }
    Ok(())
}

/// Waits for readability, then allocates a buffer of at most `max_len` and
/// performs one nonblocking read.
///
/// No buffer exists while the task is parked; allocation happens only after
/// the descriptor reports ready, so an idle connection costs no buffer
/// memory. A read that races to `EAGAIN` re-waits without reallocating
/// per iteration.
pub async fn read_lazy(
    fd: RawFd,
    max_len: usize,
    token: Option<&AbortToken>,
) -> Result<ReadOutcome, RtError> {
    loop {
        match io_wait(fd, IoDirection::In, token).await? {
            IoOutcome::Aborted => return Ok(ReadOutcome::Aborted),
            IoOutcome::Closed => return Ok(ReadOutcome::Eof),
            IoOutcome::Ready => {}
        }
        alloc_hint(max_len)?;
        let mut buf = vec![0u8; max_len];
        let n = unsafe { libc::read(fd, buf.as_mut_ptr() as *mut libc::c_void, max_len) };
        if n > 0 {
            buf.truncate(n as usize);
            return Ok(ReadOutcome::Data(buf));
        }
        if n == 0 {
            return Ok(ReadOutcome::Eof);
        }
        let err = std::io::Error::last_os_error();
        match err.raw_os_error() {
            Some(libc::EAGAIN) | Some(libc::EINTR) => continue,
            _ => return Err(RtError::Io(err)),
        }
    }
}

/// One write attempt that never raises SIGPIPE on sockets.
fn raw_write(fd: RawFd, buf: &[u8]) -> isize {
    let n = unsafe {
        libc::send(
            fd,
            buf.as_ptr() as *const libc::c_void,
            buf.len(),
            libc::MSG_NOSIGNAL,
        )
    };
    if n < 0 && std::io::Error::last_os_error().raw_os_error() == Some(libc::ENOTSOCK) {
        unsafe { libc::write(fd, buf.as_ptr() as *const libc::c_void, buf.len()) }
    } else {
        n
    }
}

fn write_error(written: usize, source: std::io::Error) -> RtError {
    if written > 0 {
        RtError::Write { written, source }
    } else {
        RtError::Io(source)
    }
}

/// Writes the whole buffer to `fd`.
///
/// Attached tasks interleave nonblocking writes with readiness waits, so a
/// slow receiver suspends only this task. Detached tasks write blockingly on
/// their pool worker, registering nothing with the event loop.
pub async fn write_all(fd: RawFd, data: &[u8]) -> Result<(), RtError> {
    let sched = runtime::current_scheduler()?;
    if sched.kind() == SchedKind::ThreadPool {
        return write_all_blocking(fd, data);
    }
    let mut written = 0usize;
    while written < data.len() {
        let n = raw_write(fd, &data[written..]);
        if n > 0 {
            written += n as usize;
            continue;
        }
        if n == 0 {
            return Err(write_error(
                written,
                std::io::Error::new(std::io::ErrorKind::WriteZero, "descriptor accepted no bytes"),
            ));
        }
        let err = std::io::Error::last_os_error();
        match err.raw_os_error() {
            Some(libc::EINTR) => continue,
            Some(libc::EAGAIN) => match io_wait(fd, IoDirection::Out, None).await? {
                IoOutcome::Ready => continue,
                IoOutcome::Closed | IoOutcome::Aborted => {
                    return Err(write_error(
                        written,
                        std::io::Error::new(
                            std::io::ErrorKind::BrokenPipe,
                            "peer closed while waiting to write",
                        ),
                    ));
                }
            },
            _ => return Err(write_error(written, err)),
        }
    }
    Ok(())
}

fn write_all_blocking(fd: RawFd, data: &[u8]) -> Result<(), RtError> {
    let mut written = 0usize;
    while written < data.len() {
        let n = raw_write(fd, &data[written..]);
        if n > 0 {
            written += n as usize;
            continue;
        }
        if n == 0 {
            return Err(write_error(
                written,
                std::io::Error::new(std::io::ErrorKind::WriteZero, "descriptor accepted no bytes"),
            ));
        }
        let err = std::io::Error::last_os_error();
        match err.raw_os_error() {
            Some(libc::EINTR) => continue,
            Some(libc::EAGAIN) => {
                let mut pfd = libc::pollfd {
                    fd,
                    events: libc::POLLOUT,
                    revents: 0,
                };
                let rc = unsafe { libc::poll(&mut pfd, 1, -1) };
                if rc < 0 {
                    let perr = std::io::Error::last_os_error();
                    if perr.raw_os_error() == Some(libc::EINTR) {
                        continue;
                    }
                    return Err(write_error(written, perr));
                }
            }
            _ => return Err(write_error(written, err)),
        }
    }
    Ok(())
}

/// Resolves a hostname on the pool so the blocking lookup cannot stall the
/// event loop, then reattaches.
pub async fn resolve_detached(host: &str) -> Result<Vec<IpAddr>, RtError> {
    let addrs = runtime::detached(async move {
        (host, 0u16)
            .to_socket_addrs()
            .map(|iter| iter.map(|sa| sa.ip()).collect::<Vec<_>>())
    })
    .await?;
    addrs.map_err(RtError::Io)
}

/// Puts a descriptor into nonblocking mode.
pub fn set_nonblocking(fd: RawFd) -> std::io::Result<()> {
    unsafe {
        let flags = libc::fcntl(fd, libc::F_GETFL);
        if flags == -1 {
            return Err(std::io::Error::last_os_error());
        }
        if libc::fcntl(fd, libc::F_SETFL, flags | libc::O_NONBLOCK) == -1 {
            return Err(std::io::Error::last_os_error());
        }
    }
    Ok(())
}
