use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::os::fd::RawFd;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;

use crate::error::RtError;
use crate::io::{IoDirection, IoOutcome};
use crate::sync::AbortToken;

use super::task::TaskId;

#[derive(PartialEq, Eq)]
struct TimerEntry {
    deadline: Instant,
    seq: u64,
    task: TaskId,
}

impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deadline, self.seq).cmp(&(other.deadline, other.seq))
    }
}

impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One-shot mailbox for the result of a readiness wait.
pub(crate) struct IoSlot(Mutex<Option<Result<IoOutcome, RtError>>>);

impl IoSlot {
    pub fn new() -> Arc<Self> {
        Arc::new(IoSlot(Mutex::new(None)))
    }

    pub fn set(&self, v: Result<IoOutcome, RtError>) {
        *self.0.lock() = Some(v);
    }

    pub fn take(&self) -> Option<Result<IoOutcome, RtError>> {
        self.0.lock().take()
    }
}

pub(crate) struct IoWaiter {
    pub task: TaskId,
    pub slot: Arc<IoSlot>,
    pub token: Option<AbortToken>,
}

#[derive(Default)]
struct FdEntry {
    read: Option<IoWaiter>,
    write: Option<IoWaiter>,
}

/// Loop-owned wake sources: the timer heap and the fd interest table.
pub(crate) struct Reactor {
    timers: BinaryHeap<Reverse<TimerEntry>>,
    timer_seq: u64,
    io: HashMap<RawFd, FdEntry>,
}

impl Reactor {
    pub fn new() -> Self {
        Reactor {
            timers: BinaryHeap::new(),
            timer_seq: 0,
            io: HashMap::new(),
        }
    }

    pub fn register_timer(&mut self, deadline: Instant, task: TaskId) {
        let seq = self.timer_seq;
        self.timer_seq += 1;
        self.timers.push(Reverse(TimerEntry {
            deadline,
            seq,
            task,
        }));
    }

    /// Pops every timer due at `now`, in (deadline, registration) order.
    pub fn due_timers(&mut self, now: Instant) -> Vec<TaskId> {
        let mut due = Vec::new();
        while let Some(Reverse(head)) = self.timers.peek() {
            if head.deadline > now {
                break;
            }
            due.push(self.timers.pop().unwrap().0.task);
        }
        due
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        self.timers.peek().map(|Reverse(e)| e.deadline)
    }

    pub fn register_io(
        &mut self,
        fd: RawFd,
        dir: IoDirection,
        waiter: IoWaiter,
    ) -> Result<(), RtError> {
        let entry = self.io.entry(fd).or_default();
        let slot = match dir {
            IoDirection::In => &mut entry.read,
            IoDirection::Out => &mut entry.write,
        };
        if slot.is_some() {
            if entry.read.is_none() && entry.write.is_none() {
                self.io.remove(&fd);
            }
            return Err(RtError::DuplicateWaiter { fd });
        }
        *slot = Some(waiter);
        Ok(())
    }

    pub fn remove_waiter(&mut self, fd: RawFd, dir: IoDirection) -> Option<IoWaiter> {
        let entry = self.io.get_mut(&fd)?;
        let w = match dir {
            IoDirection::In => entry.read.take(),
            IoDirection::Out => entry.write.take(),
        };
        if entry.read.is_none() && entry.write.is_none() {
            self.io.remove(&fd);
        }
        w
    }

    pub fn io_empty(&self) -> bool {
        self.io.is_empty()
    }

    pub fn io_waiter_count(&self) -> usize {
        self.io
            .values()
            .map(|e| e.read.is_some() as usize + e.write.is_some() as usize)
            .sum()
    }

    /// Appends one pollfd per registered descriptor to `out`.
    pub fn fill_pollfds(&self, out: &mut Vec<libc::pollfd>) {
        for (&fd, entry) in &self.io {
            let mut events: libc::c_short = 0;
            if entry.read.is_some() {
                events |= libc::POLLIN;
            }
            if entry.write.is_some() {
                events |= libc::POLLOUT;
            }
            out.push(libc::pollfd {
                fd,
                events,
                revents: 0,
            });
        }
    }
}
