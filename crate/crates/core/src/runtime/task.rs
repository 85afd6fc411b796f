use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;

use parking_lot::Mutex;

pub(crate) type TaskId = u64;

/// Observable lifecycle of a spawned task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    /// Queued on the event loop, waiting for its next slice.
    Ready,
    /// Currently executing.
    Running,
    /// Parked at a suspension point until some wake source fires.
    Suspended(SuspendReason),
    /// Migrated to the thread pool (queued or running there).
    Detached,
    /// Finished; terminal.
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuspendReason {
    Sleep,
    Io,
    CondVar,
    Join,
}

/// Every task future resolves to this; `Err` is recorded on the handle.
pub(crate) type TaskResult = Result<(), String>;

pub(crate) type TaskFuture = Pin<Box<dyn Future<Output = TaskResult> + Send + 'static>>;

/// Conversion from a task body's output into the recorded completion result.
///
/// Bodies may return `()` or `Result<(), E>`; an `Err` terminates only that
/// task and is stored on its handle.
pub trait IntoTaskResult {
    fn into_task_result(self) -> Result<(), String>;
}

impl IntoTaskResult for () {
    fn into_task_result(self) -> Result<(), String> {
        Ok(())
    }
}

impl<E: std::fmt::Display> IntoTaskResult for Result<(), E> {
    fn into_task_result(self) -> Result<(), String> {
        self.map_err(|e| e.to_string())
    }
}

pub(crate) struct HandleShared {
    pub state: Mutex<TaskState>,
    pub error: Mutex<Option<String>>,
}

impl HandleShared {
    pub fn new() -> Self {
        HandleShared {
            state: Mutex::new(TaskState::Ready),
            error: Mutex::new(None),
        }
    }

    pub fn set_state(&self, s: TaskState) {
        *self.state.lock() = s;
    }
}

/// Identity of a spawned task: joinable, carries completion state.
#[derive(Clone)]
pub struct TaskHandle {
    pub(crate) id: TaskId,
    pub(crate) runtime: u64,
    pub(crate) shared: Arc<HandleShared>,
}

impl TaskHandle {
    /// Opaque task identifier, unique within its runtime.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> TaskState {
        *self.shared.state.lock()
    }

    pub fn is_done(&self) -> bool {
        self.state() == TaskState::Done
    }

    /// The error the task finished with, if any.
    pub fn error(&self) -> Option<String> {
        self.shared.error.lock().clone()
    }
}

impl std::fmt::Debug for TaskHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskHandle")
            .field("id", &self.id)
            .field("state", &self.state())
            .finish()
    }
}
