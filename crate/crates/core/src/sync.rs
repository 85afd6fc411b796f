//! Cooperative synchronization: timers, condition variables, and the
//! abort-token idiom that timeouts are built from.

use std::collections::VecDeque;
use std::future::Future;
use std::os::fd::RawFd;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::error::RtError;
use crate::io::{IoDirection, IoOutcome};
use crate::loopcell::LoopCell;
use crate::runtime::task::{TaskHandle, TaskId};
use crate::runtime::{self, SchedKind, Shared, SuspendReason};

enum SleepState {
    Init,
    Suspended,
}

pub struct SleepFut {
    dur: Duration,
    state: SleepState,
}

impl Future for SleepFut {
    type Output = Result<(), RtError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if matches!(self.state, SleepState::Suspended) {
            return Poll::Ready(Ok(()));
        }
        let dur = self.dur;
        enum Decision {
            Inline,
            Suspend,
        }
        let decision = runtime::with_current(|ctx| {
            if ctx.sched.kind() == SchedKind::ThreadPool {
                return Decision::Inline;
            }
            if dur.is_zero() {
                // A zero sleep is a plain yield and counts as one.
                ctx.shared
                    .stats
                    .yields
                    .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                ctx.action = Some(runtime::Action::Yield);
                return Decision::Suspend;
            }
            let deadline = Instant::now() + dur;
            ctx.shared
                .core
                .lock()
                .reactor
                .register_timer(deadline, ctx.task);
            ctx.action = Some(runtime::Action::Park(SuspendReason::Sleep));
            Decision::Suspend
        });
        match decision {
            Err(e) => Poll::Ready(Err(e)),
            Ok(Decision::Inline) => {
                // Detached tasks own a worker thread; block it outright.
                std::thread::sleep(dur);
                Poll::Ready(Ok(()))
            }
            Ok(Decision::Suspend) => {
                self.state = SleepState::Suspended;
                Poll::Pending
            }
        }
    }
}

/// Suspends the task until at least `dur` has elapsed. Timers with equal
/// deadlines fire in registration order; a zero duration degenerates to
/// [`runtime::yield_now`].
pub fn sleep(dur: Duration) -> SleepFut {
    SleepFut {
        dur,
        state: SleepState::Init,
    }
}

/// A condition variable for attached tasks.
///
/// Waiters park on the event loop and are woken in FIFO order. There is no
/// associated lock: attached code between suspension points is already
/// mutually exclusive, so the checked condition cannot change between a
/// `signal` and the waiter's resume slice observing it, except by another
/// task running in between, which is why waits belong in a loop.
pub struct CondVar {
    waiters: LoopCell<VecDeque<runtime::TaskId>>,
}

impl CondVar {
    pub const fn new() -> Self {
        CondVar {
            waiters: LoopCell::new(VecDeque::new()),
        }
    }

    /// Parks the calling task until a signal reaches it.
    pub fn wait(&self) -> CondVarWaitFut<'_> {
        CondVarWaitFut {
            cv: self,
            parked: false,
        }
    }

    /// Wakes the longest-waiting task, if any. Returns whether one was woken.
    pub fn signal(&self) -> Result<bool, RtError> {
        let shared = self.check_attached("condvar_signal")?;
        let woken = self.waiters.with(|q| q.pop_front());
        match woken {
            Some(id) => {
                let mut core = shared.core.lock();
                runtime::Shared::make_ready_locked(&mut core, id);
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Wakes every waiting task, preserving their wait order in the ready
    /// queue. Returns how many were woken.
    pub fn broadcast(&self) -> Result<usize, RtError> {
        let shared = self.check_attached("condvar_broadcast")?;
        let woken: Vec<_> = self.waiters.with(|q| q.drain(..).collect());
        let mut core = shared.core.lock();
        for id in &woken {
            runtime::Shared::make_ready_locked(&mut core, *id);
        }
        Ok(woken.len())
    }

    fn check_attached(
        &self,
        op: &'static str,
    ) -> Result<Arc<runtime::Shared>, RtError> {
        runtime::with_current(|ctx| {
            if ctx.sched.kind() == SchedKind::ThreadPool {
                Err(RtError::DetachedModeViolation { op })
            } else {
                Ok(ctx.shared.clone())
            }
        })?
    }
}

impl Default for CondVar {
    fn default() -> Self {
        Self::new()
    }
}

pub struct CondVarWaitFut<'a> {
    cv: &'a CondVar,
    parked: bool,
}

impl Future for CondVarWaitFut<'_> {
    type Output = Result<(), RtError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if self.parked {
            return Poll::Ready(Ok(()));
        }
        let cv = self.cv;
        let outcome = runtime::with_current(|ctx| {
            if ctx.sched.kind() == SchedKind::ThreadPool {
                return Err(RtError::DetachedModeViolation { op: "condvar_wait" });
            }
            cv.waiters.with(|q| q.push_back(ctx.task));
            ctx.action = Some(runtime::Action::Park(SuspendReason::CondVar));
            Ok(())
        });
        match outcome {
            Err(e) | Ok(Err(e)) => Poll::Ready(Err(e)),
            Ok(Ok(())) => {
                self.parked = true;
                Poll::Pending
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Armed,
    Fired,
    Disarmed,
}

struct TokenState {
    phase: Phase,
    io: Option<(RawFd, IoDirection)>,
    /// The timeout helper parked on this token's deadline, as
    /// (runtime id, task id); woken early once the token settles.
    helper: Option<(u64, TaskId)>,
}

/// One-shot cancellation for readiness waits.
///
/// A token starts armed. [`fire`](AbortToken::fire) trips it once, aborting
/// whatever readiness wait currently carries the token;
/// [`disarm`](AbortToken::disarm) retires it so a later fire is a no-op.
/// Both act in loop order: they take effect at the caller's current slice,
/// never mid-operation of another task.
#[derive(Clone)]
pub struct AbortToken {
    inner: Arc<Mutex<TokenState>>,
}

pub(crate) enum RegisterOutcome {
    Proceed,
    AlreadyFired,
}

impl AbortToken {
    pub fn new() -> Self {
        AbortToken {
            inner: Arc::new(Mutex::new(TokenState {
                phase: Phase::Armed,
                io: None,
                helper: None,
            })),
        }
    }

    /// Trips the token. The first fire aborts any wait registered with it
    /// and returns true; later fires and fires after a disarm return false.
    pub fn fire(&self) -> Result<bool, RtError> {
        let shared = runtime::with_current(|ctx| {
            if ctx.sched.kind() == SchedKind::ThreadPool {
                return Err(RtError::DetachedModeViolation { op: "abort_fire" });
            }
            Ok(ctx.shared.clone())
        })??;
        let io = {
            let mut st = self.inner.lock();
            if st.phase != Phase::Armed {
                return Ok(false);
            }
            st.phase = Phase::Fired;
            st.io.take()
        };
        if let Some((fd, dir)) = io {
            let mut core = shared.core.lock();
            shared.complete_io_locked(&mut core, fd, dir, Ok(IoOutcome::Aborted));
        }
        Ok(true)
    }

    /// Retires an armed token so it can no longer abort anything. Returns
    /// false if it had already fired or been disarmed.
    pub fn disarm(&self) -> bool {
        let helper = {
            let mut st = self.inner.lock();
            if st.phase != Phase::Armed {
                return false;
            }
            st.phase = Phase::Disarmed;
            st.io = None;
            st.helper.take()
        };
        wake_helper(helper);
        true
    }

    pub fn is_fired(&self) -> bool {
        self.inner.lock().phase == Phase::Fired
    }

    pub(crate) fn register_io(&self, fd: RawFd, dir: IoDirection) -> RegisterOutcome {
        let mut st = self.inner.lock();
        match st.phase {
            Phase::Fired => RegisterOutcome::AlreadyFired,
            Phase::Armed => {
                st.io = Some((fd, dir));
                RegisterOutcome::Proceed
            }
            Phase::Disarmed => RegisterOutcome::Proceed,
        }
    }

    pub(crate) fn clear_io(&self) {
        self.inner.lock().io = None;
    }

    /// True once the token can never fire again (fired or disarmed).
    pub(crate) fn is_settled(&self) -> bool {
        self.inner.lock().phase != Phase::Armed
    }

    pub(crate) fn bind_helper(&self, handle: &TaskHandle) {
        let mut st = self.inner.lock();
        if st.phase == Phase::Armed {
            st.helper = Some((handle.runtime, handle.id));
        }
    }

    /// Final transition for the timeout idiom: exactly one of
    /// completed/timed-out. Armed tokens disarm and report completion;
    /// fired tokens report timeout.
    pub(crate) fn settle(&self) -> bool {
        let (timed_out, helper) = {
            let mut st = self.inner.lock();
            match st.phase {
                Phase::Fired => (true, None),
                Phase::Armed => {
                    st.phase = Phase::Disarmed;
                    st.io = None;
                    (false, st.helper.take())
                }
                Phase::Disarmed => (false, st.helper.take()),
            }
        };
        wake_helper(helper);
        timed_out
    }
}

/// Pulls a settled token's sleeping helper out of its nap so it can exit
/// (and let the loop wind down) instead of dozing to the full deadline.
/// Only possible from a task attached to the helper's own runtime; anywhere
/// else the helper simply expires on schedule, which is also fine.
fn wake_helper(helper: Option<(u64, TaskId)>) {
    let Some((runtime_id, task)) = helper else {
        return;
    };
    let _ = runtime::with_current(|ctx| {
        if ctx.shared.runtime_id == runtime_id && ctx.sched.kind() == SchedKind::EventLoop {
            let mut core = ctx.shared.core.lock();
            Shared::make_ready_locked(&mut core, task);
        }
    });
}

impl Default for AbortToken {
    fn default() -> Self {
        Self::new()
    }
}

/// How a [`with_timeout`] call resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutOutcome<T> {
    /// The operation finished before the deadline; the timer was disarmed.
    Completed(T),
    /// The deadline fired first and aborted the operation.
    TimedOut,
}

impl<T> TimeoutOutcome<T> {
    pub fn timed_out(&self) -> bool {
        matches!(self, TimeoutOutcome::TimedOut)
    }

    pub fn completed(self) -> Option<T> {
        match self {
            TimeoutOutcome::Completed(v) => Some(v),
            TimeoutOutcome::TimedOut => None,
        }
    }
}

/// Runs `op` with a deadline of `dur`.
///
/// A helper task is spawned that sleeps until the deadline and then fires
/// the token; if `op` finishes first the token is disarmed, the helper is
/// woken early, and its fire becomes a no-op. Exactly one of
/// `Completed`/`TimedOut` is reported per call.
pub async fn with_timeout<F, Fut, T>(dur: Duration, op: F) -> Result<TimeoutOutcome<T>, RtError>
where
    F: FnOnce(AbortToken) -> Fut,
    Fut: Future<Output = T>,
{
    let token = AbortToken::new();
    let helper_token = token.clone();
    let helper = runtime::spawn(async move {
        if !helper_token.is_settled() {
            sleep(dur).await?;
        }
        helper_token.fire()?;
        Ok::<(), RtError>(())
    })?;
    token.bind_helper(&helper);
    let value = op(token.clone()).await;
    if token.settle() {
        Ok(TimeoutOutcome::TimedOut)
    } else {
        Ok(TimeoutOutcome::Completed(value))
    }
}
