//! Hybrid scheduler core: a single-threaded cooperative event loop plus a
//! preemptive worker pool, with explicit task migration between the two.

mod context;
mod pool;
mod reactor;
pub(crate) mod task;

pub use task::{IntoTaskResult, SuspendReason, TaskHandle, TaskState};

pub(crate) use context::{current_shared, with_current, Action, TaskCtx};
pub(crate) use reactor::{IoSlot, IoWaiter, Reactor};
pub(crate) use task::{TaskFuture, TaskId, TaskResult};

use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::os::fd::RawFd;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll, Waker};
use std::thread::ThreadId;
use std::time::Instant;

use parking_lot::Mutex;

use crate::error::RtError;
use crate::io::{IoDirection, IoOutcome};

use pool::{PoolState, Shipment};
use task::HandleShared;

/// Which side of the runtime a scheduler reference names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchedKind {
    EventLoop,
    ThreadPool,
}

/// A cheap, copyable name for one of a runtime's schedulers. Two references
/// are equal exactly when they name the same scheduler of the same runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SchedulerRef {
    runtime: u64,
    kind: SchedKind,
}

impl SchedulerRef {
    pub(crate) fn event_loop(runtime: u64) -> Self {
        SchedulerRef {
            runtime,
            kind: SchedKind::EventLoop,
        }
    }

    pub(crate) fn thread_pool(runtime: u64) -> Self {
        SchedulerRef {
            runtime,
            kind: SchedKind::ThreadPool,
        }
    }

    pub fn kind(&self) -> SchedKind {
        self.kind
    }
}

/// Counters kept by the runtime; snapshot via [`Runtime::stats`].
#[derive(Default)]
pub(crate) struct Stats {
    pub tasks_spawned: AtomicU64,
    pub context_switches: AtomicU64,
    pub pool_dispatches: AtomicU64,
    pub yields: AtomicU64,
    pub io_registrations: AtomicU64,
    pub live_tasks: AtomicU64,
}

/// Point-in-time view of the runtime counters.
///
/// `context_switches` counts every poll of a task body, on either scheduler.
/// `live_tasks` is spawned-but-not-finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuntimeStats {
    pub tasks_spawned: u64,
    pub context_switches: u64,
    pub pool_dispatches: u64,
    pub yields: u64,
    pub io_registrations: u64,
    pub live_tasks: u64,
}

impl RuntimeStats {
    /// One `key=value` line per counter, stable order.
    pub fn render(&self) -> String {
        format!(
            "tasks_spawned={}\ncontext_switches={}\npool_dispatches={}\nyields={}\nio_registrations={}\nlive_tasks={}\n",
            self.tasks_spawned,
            self.context_switches,
            self.pool_dispatches,
            self.yields,
            self.io_registrations,
            self.live_tasks,
        )
    }
}

impl std::fmt::Display for RuntimeStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

/// Messages other threads push at the event loop.
pub(crate) enum LoopMsg {
    NewTask {
        id: TaskId,
        future: TaskFuture,
        handle: Arc<HandleShared>,
    },
    ReAttach {
        id: TaskId,
        future: TaskFuture,
    },
    Completed {
        id: TaskId,
        result: TaskResult,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunState {
    Queued,
    Polling,
    Parked,
    Detached,
}

struct TaskSlot {
    future: Option<TaskFuture>,
    run_state: RunState,
    handle: Arc<HandleShared>,
}

/// Loop-thread-owned scheduler state. Other threads only touch it through
/// short critical sections (spawn bookkeeping, never across a poll).
pub(crate) struct LoopCore {
    ready: VecDeque<TaskId>,
    tasks: HashMap<TaskId, TaskSlot>,
    join_waiters: HashMap<TaskId, Vec<TaskId>>,
    pub(crate) reactor: Reactor,
}

impl LoopCore {
    fn new() -> Self {
        LoopCore {
            ready: VecDeque::new(),
            tasks: HashMap::new(),
            join_waiters: HashMap::new(),
            reactor: Reactor::new(),
        }
    }
}

const STATE_IDLE: u8 = 0;
const STATE_RUNNING: u8 = 1;
const STATE_SHUTDOWN: u8 = 2;

type AllocProbe = Box<dyn Fn(usize) + Send + Sync>;

pub(crate) struct Shared {
    pub runtime_id: u64,
    state: AtomicU8,
    loop_thread: Mutex<Option<ThreadId>>,
    pub(crate) core: Mutex<LoopCore>,
    injector: Mutex<VecDeque<LoopMsg>>,
    wake_read: RawFd,
    wake_write: RawFd,
    next_task: AtomicU64,
    pub(crate) stats: Stats,
    pool: PoolState,
    pub(crate) alloc_probe: Mutex<Option<AllocProbe>>,
}

impl Drop for Shared {
    fn drop(&mut self) {
        unsafe {
            libc::close(self.wake_read);
            libc::close(self.wake_write);
        }
    }
}

pub(crate) fn panic_message(payload: &Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("task panicked: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("task panicked: {s}")
    } else {
        "task panicked".to_string()
    }
}

impl Shared {
    fn on_loop_thread(&self) -> bool {
        *self.loop_thread.lock() == Some(std::thread::current().id())
    }

    pub(crate) fn inject(&self, msg: LoopMsg) {
        self.injector.lock().push_back(msg);
        self.wake();
    }

    fn wake(&self) {
        let buf = [1u8];
        unsafe {
            libc::write(self.wake_write, buf.as_ptr() as *const libc::c_void, 1);
        }
    }

    /// Moves a parked task back onto the ready queue. Tolerates tasks that
    /// are already queued or gone; wake sources may lag a completion.
    pub(crate) fn make_ready_locked(core: &mut LoopCore, id: TaskId) {
        if let Some(slot) = core.tasks.get_mut(&id) {
            if slot.run_state == RunState::Parked {
                slot.run_state = RunState::Queued;
                slot.handle.set_state(TaskState::Ready);
                core.ready.push_back(id);
            }
        }
    }

    pub(crate) fn finalize_locked(&self, core: &mut LoopCore, id: TaskId, result: TaskResult) {
        let Some(slot) = core.tasks.remove(&id) else {
            return;
        };
        *slot.handle.error.lock() = result.err();
        slot.handle.set_state(TaskState::Done);
        self.stats.live_tasks.fetch_sub(1, Ordering::Relaxed);
        if let Some(waiters) = core.join_waiters.remove(&id) {
            for w in waiters {
                Self::make_ready_locked(core, w);
            }
        }
    }

    /// Delivers `result` to the task waiting on `(fd, dir)`, if any, and
    /// readies it. Used by the poller, by abort tokens, and by teardown.
    pub(crate) fn complete_io_locked(
        &self,
        core: &mut LoopCore,
        fd: RawFd,
        dir: IoDirection,
        result: Result<IoOutcome, RtError>,
    ) {
        if let Some(waiter) = core.reactor.remove_waiter(fd, dir) {
            if let Some(token) = &waiter.token {
                token.clear_io();
            }
            waiter.slot.set(result);
            Self::make_ready_locked(core, waiter.task);
        }
    }

    fn spawn_on(self: &Arc<Self>, future: TaskFuture) -> Result<TaskHandle, RtError> {
        if self.state.load(Ordering::SeqCst) == STATE_SHUTDOWN {
            return Err(RtError::RuntimeShutDown);
        }
        let id = self.next_task.fetch_add(1, Ordering::Relaxed);
        let handle = Arc::new(HandleShared::new());
        self.stats.tasks_spawned.fetch_add(1, Ordering::Relaxed);
        self.stats.live_tasks.fetch_add(1, Ordering::Relaxed);
        let task_handle = TaskHandle {
            id,
            runtime: self.runtime_id,
            shared: handle.clone(),
        };
        if self.on_loop_thread() {
            let mut core = self.core.lock();
            core.tasks.insert(
                id,
                TaskSlot {
                    future: Some(future),
                    run_state: RunState::Queued,
                    handle,
                },
            );
            core.ready.push_back(id);
        } else {
            self.inject(LoopMsg::NewTask { id, future, handle });
        }
        Ok(task_handle)
    }

    fn drain_injector(&self) {
        let msgs: Vec<LoopMsg> = {
            let mut inj = self.injector.lock();
            inj.drain(..).collect()
        };
        if msgs.is_empty() {
            return;
        }
        let mut core = self.core.lock();
        for msg in msgs {
            match msg {
                LoopMsg::NewTask { id, future, handle } => {
                    core.tasks.insert(
                        id,
                        TaskSlot {
                            future: Some(future),
                            run_state: RunState::Queued,
                            handle,
                        },
                    );
                    core.ready.push_back(id);
                }
                LoopMsg::ReAttach { id, future } => {
                    if let Some(slot) = core.tasks.get_mut(&id) {
                        debug_assert_eq!(slot.run_state, RunState::Detached);
                        slot.future = Some(future);
                        slot.run_state = RunState::Queued;
                        slot.handle.set_state(TaskState::Ready);
                        core.ready.push_back(id);
                    }
                }
                LoopMsg::Completed { id, result } => {
                    self.finalize_locked(&mut core, id, result);
                }
            }
        }
    }

    /// Fails every task still sitting in the injector after the loop exits.
    fn discard_injector(&self) {
        let msgs: Vec<LoopMsg> = {
            let mut inj = self.injector.lock();
            inj.drain(..).collect()
        };
        for msg in msgs {
            if let LoopMsg::NewTask { handle, .. } = msg {
                *handle.error.lock() = Some("runtime shut down before the task ran".to_string());
                handle.set_state(TaskState::Done);
                self.stats.live_tasks.fetch_sub(1, Ordering::Relaxed);
            }
        }
    }

    fn fire_due_timers(&self) {
        let now = Instant::now();
        let mut core = self.core.lock();
        for task in core.reactor.due_timers(now) {
            Self::make_ready_locked(&mut core, task);
        }
    }

    /// Polls one ready task to its next suspension point.
    fn execute(self: &Arc<Self>, id: TaskId) {
        let mut future = {
            let mut core = self.core.lock();
            let Some(slot) = core.tasks.get_mut(&id) else {
                return;
            };
            debug_assert_eq!(slot.run_state, RunState::Queued);
            slot.run_state = RunState::Polling;
            slot.handle.set_state(TaskState::Running);
            slot.future.take().expect("queued task owns its future")
        };
        self.stats.context_switches.fetch_add(1, Ordering::Relaxed);

        context::enter(TaskCtx {
            shared: self.clone(),
            task: id,
            sched: SchedulerRef::event_loop(self.runtime_id),
            action: None,
        });
        let polled = catch_unwind(AssertUnwindSafe(|| {
            let mut cx = Context::from_waker(Waker::noop());
            future.as_mut().poll(&mut cx)
        }));
        let ctx = context::exit();

        let mut core = self.core.lock();
        match polled {
            Err(payload) => {
                self.finalize_locked(&mut core, id, Err(panic_message(&payload)));
            }
            Ok(Poll::Ready(result)) => {
                self.finalize_locked(&mut core, id, result);
            }
            Ok(Poll::Pending) => match ctx.action {
                Some(Action::Yield) => {
                    let slot = core.tasks.get_mut(&id).expect("pending task slot");
                    slot.future = Some(future);
                    slot.run_state = RunState::Queued;
                    slot.handle.set_state(TaskState::Ready);
                    core.ready.push_back(id);
                }
                Some(Action::Park(reason)) => {
                    let slot = core.tasks.get_mut(&id).expect("pending task slot");
                    slot.future = Some(future);
                    slot.run_state = RunState::Parked;
                    slot.handle.set_state(TaskState::Suspended(reason));
                }
                Some(Action::Migrate(target)) => {
                    debug_assert_eq!(target.kind, SchedKind::ThreadPool);
                    let slot = core.tasks.get_mut(&id).expect("pending task slot");
                    slot.run_state = RunState::Detached;
                    slot.handle.set_state(TaskState::Detached);
                    self.stats.pool_dispatches.fetch_add(1, Ordering::Relaxed);
                    drop(core);
                    self.pool.dispatch(self, Shipment { id, future });
                }
                None => {
                    self.finalize_locked(
                        &mut core,
                        id,
                        Err("task polled a foreign future; only runtime operations may suspend"
                            .to_string()),
                    );
                }
            },
        }
    }

    fn classify(revents: libc::c_short, dir: IoDirection) -> Option<Result<IoOutcome, RtError>> {
        if revents & libc::POLLNVAL != 0 {
            return Some(Err(RtError::InvalidDescriptor));
        }
        let ready_bit = match dir {
            IoDirection::In => libc::POLLIN,
            IoDirection::Out => libc::POLLOUT,
        };
        if revents & ready_bit != 0 {
            return Some(Ok(IoOutcome::Ready));
        }
        if revents & (libc::POLLHUP | libc::POLLERR) != 0 {
            return Some(Ok(IoOutcome::Closed));
        }
        None
    }

    fn poll_os(&self, timeout_ms: i32) {
        let mut fds: Vec<libc::pollfd> = vec![libc::pollfd {
            fd: self.wake_read,
            events: libc::POLLIN,
            revents: 0,
        }];
        self.core.lock().reactor.fill_pollfds(&mut fds);

        let n = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, timeout_ms) };
        if n < 0 {
            let err = std::io::Error::last_os_error();
            if err.raw_os_error() != Some(libc::EINTR) {
                log::warn!("poll failed: {err}");
            }
            return;
        }
        if n == 0 {
            return;
        }
        if fds[0].revents & libc::POLLIN != 0 {
            let mut buf = [0u8; 256];
            loop {
                let r = unsafe {
                    libc::read(self.wake_read, buf.as_mut_ptr() as *mut libc::c_void, 256)
                };
                if r <= 0 {
                    break;
                }
            }
        }
        let mut core = self.core.lock();
        for pfd in &fds[1..] {
            if pfd.revents == 0 {
                continue;
            }
            for dir in [IoDirection::In, IoDirection::Out] {
                if let Some(result) = Self::classify(pfd.revents, dir) {
                    self.complete_io_locked(&mut core, pfd.fd, dir, result);
                }
            }
        }
    }

    fn drive(self: &Arc<Self>) {
        loop {
            self.drain_injector();
            self.fire_due_timers();

            let batch: Vec<TaskId> = {
                let mut core = self.core.lock();
                core.ready.drain(..).collect()
            };
            for id in batch {
                self.execute(id);
            }

            let (ready_empty, io_empty, next_deadline) = {
                let core = self.core.lock();
                (
                    core.ready.is_empty(),
                    core.reactor.io_empty(),
                    core.reactor.next_deadline(),
                )
            };
            let injector_empty = self.injector.lock().is_empty();
            let live = self.stats.live_tasks.load(Ordering::Relaxed);

            if live == 0 && ready_empty && injector_empty {
                // Stale timer entries may remain (a timeout helper woken
                // early leaves its deadline in the heap); with no live task
                // they are inert. Pending io waiters without a live task
                // would be a leak, though.
                debug_assert!(io_empty);
                break;
            }

            let work_pending = !ready_empty || !injector_empty;
            if work_pending {
                if io_empty {
                    continue;
                }
                self.poll_os(0);
                continue;
            }

            let timeout_ms = match next_deadline {
                Some(deadline) => {
                    let now = Instant::now();
                    if deadline <= now {
                        continue;
                    }
                    let micros = deadline.duration_since(now).as_micros();
                    micros.div_ceil(1000).min(i32::MAX as u128) as i32
                }
                None => -1,
            };
            self.poll_os(timeout_ms);
        }
    }
}

/// Configuration for [`Runtime::with_config`].
#[derive(Debug, Default, Clone)]
pub struct RuntimeConfig {
    /// Worker count for the preemptive pool. `None` falls back to the
    /// `HS_POOL_SIZE` environment variable, then to available parallelism.
    pub pool_size: Option<usize>,
}

fn resolve_pool_size(config: &RuntimeConfig) -> usize {
    if let Some(n) = config.pool_size {
        return n.max(1);
    }
    if let Some(n) = std::env::var("HS_POOL_SIZE")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
    {
        return n;
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

static NEXT_RUNTIME: AtomicU64 = AtomicU64::new(1);

/// The hybrid runtime: one cooperative event loop plus a preemptive pool.
///
/// Tasks spawn in attached (cooperative) mode and run on the loop thread;
/// [`detached`] migrates the current task to the pool for a blocking section
/// and back. [`Runtime::run`] drives everything to completion on the calling
/// thread.
pub struct Runtime {
    shared: Arc<Shared>,
}

impl Runtime {
    pub fn new() -> Self {
        Self::with_config(RuntimeConfig::default())
    }

    pub fn with_config(config: RuntimeConfig) -> Self {
        let mut fds = [0 as RawFd; 2];
        let rc = unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC | libc::O_NONBLOCK) };
        assert_eq!(rc, 0, "pipe2 failed: {}", std::io::Error::last_os_error());
        let pool_size = resolve_pool_size(&config);
        Runtime {
            shared: Arc::new(Shared {
                runtime_id: NEXT_RUNTIME.fetch_add(1, Ordering::Relaxed),
                state: AtomicU8::new(STATE_IDLE),
                loop_thread: Mutex::new(None),
                core: Mutex::new(LoopCore::new()),
                injector: Mutex::new(VecDeque::new()),
                wake_read: fds[0],
                wake_write: fds[1],
                next_task: AtomicU64::new(1),
                stats: Stats::default(),
                pool: PoolState::new(pool_size),
                alloc_probe: Mutex::new(None),
            }),
        }
    }

    /// Queues a task. Callable from any thread, before or during `run`.
    pub fn spawn<F>(&self, future: F) -> Result<TaskHandle, RtError>
    where
        F: Future + Send + 'static,
        F::Output: IntoTaskResult,
    {
        self.shared
            .spawn_on(Box::pin(async move { future.await.into_task_result() }))
    }

    /// Runs the event loop on the calling thread until no task is live.
    ///
    /// A runtime runs once; a second call fails with `RuntimeShutDown`, a
    /// concurrent call with `AlreadyRunning`.
    pub fn run(&self) -> Result<(), RtError> {
        match self.shared.state.compare_exchange(
            STATE_IDLE,
            STATE_RUNNING,
            Ordering::SeqCst,
            Ordering::SeqCst,
        ) {
            Ok(_) => {}
            Err(STATE_RUNNING) => return Err(RtError::AlreadyRunning),
            Err(_) => return Err(RtError::RuntimeShutDown),
        }
        *self.shared.loop_thread.lock() = Some(std::thread::current().id());
        self.shared.drive();
        self.shared.state.store(STATE_SHUTDOWN, Ordering::SeqCst);
        self.shared.discard_injector();
        self.shared.pool.shutdown();
        *self.shared.loop_thread.lock() = None;
        Ok(())
    }

    pub fn stats(&self) -> RuntimeStats {
        let s = &self.shared.stats;
        RuntimeStats {
            tasks_spawned: s.tasks_spawned.load(Ordering::Relaxed),
            context_switches: s.context_switches.load(Ordering::Relaxed),
            pool_dispatches: s.pool_dispatches.load(Ordering::Relaxed),
            yields: s.yields.load(Ordering::Relaxed),
            io_registrations: s.io_registrations.load(Ordering::Relaxed),
            live_tasks: s.live_tasks.load(Ordering::Relaxed),
        }
    }

    pub fn event_loop(&self) -> SchedulerRef {
        SchedulerRef::event_loop(self.shared.runtime_id)
    }

    pub fn thread_pool(&self) -> SchedulerRef {
        SchedulerRef::thread_pool(self.shared.runtime_id)
    }

    pub fn pool_size(&self) -> usize {
        self.shared.pool.size()
    }

    /// Installs a probe called with the byte count right before an input
    /// buffer is allocated by [`crate::io::read_lazy`]. Diagnostic use.
    pub fn set_alloc_probe(&self, probe: Option<Box<dyn Fn(usize) + Send + Sync>>) {
        *self.shared.alloc_probe.lock() = probe;
    }

    /// Readiness waits currently registered with the loop. Diagnostic use;
    /// a drained runtime should report zero.
    pub fn pending_io_waiters(&self) -> usize {
        self.shared.core.lock().reactor.io_waiter_count()
    }
}

impl Default for Runtime {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shared.pool.shutdown();
    }
}

/// Spawns a task from inside another task onto the same runtime.
pub fn spawn<F>(future: F) -> Result<TaskHandle, RtError>
where
    F: Future + Send + 'static,
    F::Output: IntoTaskResult,
{
    let shared = current_shared()?;
    shared.spawn_on(Box::pin(async move { future.await.into_task_result() }))
}

/// The scheduler the current task is running on.
pub fn current_scheduler() -> Result<SchedulerRef, RtError> {
    with_current(|ctx| ctx.sched)
}

pub struct YieldFut {
    polled: bool,
}

impl Future for YieldFut {
    type Output = Result<(), RtError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if self.polled {
            return Poll::Ready(Ok(()));
        }
        let set = with_current(|ctx| {
            if ctx.sched.kind == SchedKind::ThreadPool {
                // Preemptive threads have nothing to yield to.
                false
            } else {
                ctx.shared.stats.yields.fetch_add(1, Ordering::Relaxed);
                ctx.action = Some(Action::Yield);
                true
            }
        });
        match set {
            Err(e) => Poll::Ready(Err(e)),
            Ok(false) => Poll::Ready(Ok(())),
            Ok(true) => {
                self.polled = true;
                Poll::Pending
            }
        }
    }
}

/// Gives every other ready task one slice before this task resumes.
pub fn yield_now() -> YieldFut {
    YieldFut { polled: false }
}

pub struct AttachFut {
    target: SchedulerRef,
    prev: Option<SchedulerRef>,
}

impl Future for AttachFut {
    type Output = Result<SchedulerRef, RtError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if let Some(prev) = self.prev {
            debug_assert!(with_current(|ctx| ctx.sched == self.target).unwrap_or(false));
            return Poll::Ready(Ok(prev));
        }
        let target = self.target;
        let outcome = with_current(|ctx| {
            if ctx.shared.runtime_id != target.runtime {
                return Err(RtError::ForeignScheduler);
            }
            if ctx.sched == target {
                return Ok(None);
            }
            let prev = ctx.sched;
            ctx.action = Some(Action::Migrate(target));
            Ok(Some(prev))
        });
        match outcome {
            Err(e) | Ok(Err(e)) => Poll::Ready(Err(e)),
            Ok(Ok(None)) => Poll::Ready(Ok(target)),
            Ok(Ok(Some(prev))) => {
                self.prev = Some(prev);
                Poll::Pending
            }
        }
    }
}

/// Migrates the current task to `target`, resolving to the scheduler it was
/// on before. Attaching to the scheduler already running the task is a no-op
/// that completes without suspending.
pub fn attach(target: SchedulerRef) -> AttachFut {
    AttachFut { target, prev: None }
}

/// Runs `block` on the preemptive pool, then reattaches to the scheduler the
/// task came from. Blocking calls inside `block` stall only a pool worker.
///
/// Reattachment happens on every exit path: normal completion, an `Err`
/// returned through `block`'s output, and panics, which are re-raised on the
/// original scheduler once the task is back. Calling `detached` while already
/// detached runs `block` in place.
pub async fn detached<F>(block: F) -> Result<F::Output, RtError>
where
    F: Future + Send,
    F::Output: Send,
{
    let sched = current_scheduler()?;
    if sched.kind == SchedKind::ThreadPool {
        return Ok(block.await);
    }
    let prev = attach(SchedulerRef::thread_pool(sched.runtime)).await?;

    let mut block = std::pin::pin!(block);
    let caught: Result<F::Output, Box<dyn Any + Send>> = std::future::poll_fn(|cx| {
        match catch_unwind(AssertUnwindSafe(|| block.as_mut().poll(cx))) {
            Ok(Poll::Pending) => Poll::Pending,
            Ok(Poll::Ready(v)) => Poll::Ready(Ok(v)),
            Err(payload) => Poll::Ready(Err(payload)),
        }
    })
    .await;

    let back = attach(prev).await;
    match caught {
        Ok(value) => {
            back?;
            Ok(value)
        }
        Err(payload) => std::panic::resume_unwind(payload),
    }
}

pub(crate) struct JoinFut {
    target: TaskId,
    target_runtime: u64,
    handle: Arc<HandleShared>,
    registered: bool,
}

impl Future for JoinFut {
    type Output = Result<(), RtError>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        if *self.handle.state.lock() == TaskState::Done {
            return Poll::Ready(Ok(()));
        }
        if self.registered {
            // Woken but the target is somehow not done; re-park.
            debug_assert!(false, "join woken before target completion");
        }
        let target = self.target;
        let target_runtime = self.target_runtime;
        let outcome = with_current(|ctx| {
            if ctx.shared.runtime_id != target_runtime {
                return Err(RtError::ForeignScheduler);
            }
            if ctx.sched.kind == SchedKind::ThreadPool {
                return Err(RtError::DetachedModeViolation { op: "join" });
            }
            if ctx.task == target {
                return Err(RtError::JoinSelf);
            }
            let mut core = ctx.shared.core.lock();
            if !core.tasks.contains_key(&target) {
                // Completed between the state check and registration.
                return Ok(false);
            }
            core.join_waiters.entry(target).or_default().push(ctx.task);
            ctx.action = Some(Action::Park(SuspendReason::Join));
            Ok(true)
        });
        match outcome {
            Err(e) | Ok(Err(e)) => Poll::Ready(Err(e)),
            Ok(Ok(false)) => Poll::Ready(Ok(())),
            Ok(Ok(true)) => {
                self.registered = true;
                Poll::Pending
            }
        }
    }
}

impl TaskHandle {
    /// Suspends the calling task until this task finishes. The target's own
    /// failure, if any, is reported by [`TaskHandle::error`], not here.
    pub fn join(&self) -> impl Future<Output = Result<(), RtError>> {
        JoinFut {
            target: self.id,
            target_runtime: self.runtime,
            handle: self.shared.clone(),
            registered: false,
        }
    }
}
