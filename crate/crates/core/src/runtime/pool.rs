use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::task::{Context, Poll, Waker};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;

use super::context::{self, Action, TaskCtx};
use super::task::{TaskFuture, TaskId};
use super::{panic_message, LoopMsg, SchedulerRef, Shared};

pub(crate) struct Shipment {
    pub id: TaskId,
    pub future: TaskFuture,
}

struct PoolInner {
    sender: Option<Sender<Shipment>>,
    workers: Vec<std::thread::JoinHandle<()>>,
}

/// Preemptive side of the runtime: a fixed-size pool of worker threads,
/// started lazily on the first migration.
pub(crate) struct PoolState {
    size: usize,
    inner: Mutex<PoolInner>,
}

impl PoolState {
    pub fn new(size: usize) -> Self {
        PoolState {
            size,
            inner: Mutex::new(PoolInner {
                sender: None,
                workers: Vec::new(),
            }),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dispatch(&self, shared: &Arc<Shared>, shipment: Shipment) {
        let mut inner = self.inner.lock();
        if inner.sender.is_none() {
            let (tx, rx) = crossbeam_channel::unbounded::<Shipment>();
            for i in 0..self.size {
                let rx = rx.clone();
                let shared = shared.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("hs-pool-{i}"))
                    .spawn(move || worker_main(shared, rx))
                    .expect("failed to spawn pool worker");
                inner.workers.push(handle);
            }
            inner.sender = Some(tx);
        }
        inner
            .sender
            .as_ref()
            .expect("pool sender present")
            .send(shipment)
            .expect("pool workers alive while runtime runs");
    }

    /// Drops the channel and joins every worker. Idempotent.
    pub fn shutdown(&self) {
        let (sender, workers) = {
            let mut inner = self.inner.lock();
            (inner.sender.take(), std::mem::take(&mut inner.workers))
        };
        drop(sender);
        for w in workers {
            let _ = w.join();
        }
    }
}

fn worker_main(shared: Arc<Shared>, rx: Receiver<Shipment>) {
    let loop_ref = SchedulerRef::event_loop(shared.runtime_id);
    let pool_ref = SchedulerRef::thread_pool(shared.runtime_id);
    while let Ok(shipment) = rx.recv() {
        run_detached(&shared, loop_ref, pool_ref, shipment);
    }
}

/// Polls a migrated task once on this worker thread and routes the result
/// back to the event loop.
fn run_detached(shared: &Arc<Shared>, loop_ref: SchedulerRef, pool_ref: SchedulerRef, shipment: Shipment) {
    let Shipment { id, mut future } = shipment;
    shared
        .stats
        .context_switches
        .fetch_add(1, std::sync::atomic::Ordering::Relaxed);

    context::enter(TaskCtx {
        shared: shared.clone(),
        task: id,
        sched: pool_ref,
        action: None,
    });
    let polled = catch_unwind(AssertUnwindSafe(|| {
        let mut cx = Context::from_waker(Waker::noop());
        future.as_mut().poll(&mut cx)
    }));
    let ctx = context::exit();

    let msg = match polled {
        Err(payload) => LoopMsg::Completed {
            id,
            result: Err(panic_message(&payload)),
        },
        Ok(Poll::Ready(result)) => LoopMsg::Completed { id, result },
        Ok(Poll::Pending) => match ctx.action {
            Some(Action::Migrate(target)) if target == loop_ref => {
                LoopMsg::ReAttach { id, future }
            }
            Some(_) => LoopMsg::Completed {
                id,
                result: Err("detached task suspended on a loop-only operation".into()),
            },
            None => LoopMsg::Completed {
                id,
                result: Err(
                    "task polled a foreign future; only runtime operations may suspend".into(),
                ),
            },
        },
    };
    shared.inject(msg);
}
