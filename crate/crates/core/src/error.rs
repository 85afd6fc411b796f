use std::io;
use std::os::fd::RawFd;

/// Errors reported by runtime operations.
#[derive(Debug, thiserror::Error)]
pub enum RtError {
    /// The runtime already ran to completion and cannot accept work.
    #[error("runtime is shut down")]
    RuntimeShutDown,

    /// `run` was called while another thread is already driving the loop.
    #[error("runtime is already running")]
    AlreadyRunning,

    /// A task-only operation was called outside any task.
    #[error("not inside a runtime task")]
    NotInTask,

    /// A scheduler reference from a different runtime was passed in.
    #[error("scheduler belongs to a different runtime")]
    ForeignScheduler,

    /// A task tried to join its own handle.
    #[error("task cannot join itself")]
    JoinSelf,

    /// A cooperative-only operation was invoked from detached mode.
    #[error("operation `{op}` requires attached mode")]
    DetachedModeViolation { op: &'static str },

    /// The file descriptor failed the registration validity check.
    #[error("file descriptor is not open")]
    InvalidDescriptor,

    /// Another task is already waiting on this descriptor and direction.
    #[error("descriptor {fd} already has a waiter for this direction")]
    DuplicateWaiter { fd: RawFd },

    #[error(transparent)]
    Io(#[from] io::Error),

    /// A write failed after part of the buffer had been sent.
    #[error("write failed after {written} bytes: {source}")]
    Write {
        written: usize,
        #[source]
        source: io::Error,
    },
}

impl RtError {
    /// Bytes that made it out before a failed write, if this is one.
    pub fn partial_write(&self) -> Option<usize> {
        match self {
            RtError::Write { written, .. } => Some(*written),
            _ => None,
        }
    }
}
