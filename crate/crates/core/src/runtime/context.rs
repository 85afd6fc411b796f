use std::cell::RefCell;
use std::sync::Arc;

use crate::error::RtError;

use super::task::{SuspendReason, TaskId};
use super::{SchedulerRef, Shared};

/// What the task asked the executor to do when its poll returns `Pending`.
pub(crate) enum Action {
    Yield,
    Park(SuspendReason),
    Migrate(SchedulerRef),
}

pub(crate) struct TaskCtx {
    pub shared: Arc<Shared>,
    pub task: TaskId,
    pub sched: SchedulerRef,
    pub action: Option<Action>,
}

thread_local! {
    static CURRENT: RefCell<Option<TaskCtx>> = const { RefCell::new(None) };
}

pub(crate) fn enter(ctx: TaskCtx) {
    CURRENT.with(|c| {
        let prev = c.borrow_mut().replace(ctx);
        debug_assert!(prev.is_none(), "task context already set on this thread");
    });
}

pub(crate) fn exit() -> TaskCtx {
    CURRENT.with(|c| {
        c.borrow_mut()
            .take()
            .expect("task context missing at poll exit")
    })
}

/// Runs `f` with the current task context, or fails with `NotInTask`.
///
/// The closure must not recursively call back into context accessors; keep
/// each access short and release before doing real work.
pub(crate) fn with_current<R>(f: impl FnOnce(&mut TaskCtx) -> R) -> Result<R, RtError> {
    CURRENT.with(|c| {
        let mut b = c.borrow_mut();
        match b.as_mut() {
            Some(ctx) => Ok(f(ctx)),
            None => Err(RtError::NotInTask),
        }
    })
}

pub(crate) fn current_shared() -> Result<Arc<Shared>, RtError> {
    with_current(|c| c.shared.clone())
}
