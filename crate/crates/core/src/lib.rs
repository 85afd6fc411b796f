//! A hybrid concurrency runtime: massive numbers of cooperative tasks on a
//! single-threaded event loop, with on-demand migration of individual tasks
//! to a preemptive thread pool for blocking work.
//!
//! Tasks are ordinary `async` blocks, but the scheduler is deliberately
//! minimal: code between two suspension points runs to completion with
//! respect to every other attached task, so most shared state needs no
//! locking. The only suspension points are the runtime's own operations
//! ([`yield_now`], [`sleep`], [`io_wait`] and the I/O helpers built on it,
//! [`CondVar::wait`], joins, and scheduler migration via [`attach`] /
//! [`detached`]).
//!
//! ```
//! use hekate_core::{Runtime, yield_now};
//!
//! let rt = Runtime::new();
//! rt.spawn(async {
//!     yield_now().await.unwrap();
//! }).unwrap();
//! rt.run().unwrap();
//! assert_eq!(rt.stats().tasks_spawned, 1);
//! ```

pub mod bench;
pub mod error;
pub mod hybrid;
pub mod io;
pub mod loopcell;
pub mod runtime;
pub mod seeder;
pub mod store;
pub mod sync;

pub use bench::{
    bench_spawn, bench_switch, sim_local, sim_peers, ChokeFairness, RequestPattern, SimOptions,
    SimPeerConfig, SimSummary, SpawnBench, SwitchBench,
};
pub use error::RtError;
pub use hybrid::{
    send_file_chunk, FileRegion, OsResidency, RegionError, Residency, ResidencyOracle,
    ScriptedResidency, SendPath,
};
pub use io::{
    io_wait, read_lazy, resolve_detached, set_nonblocking, write_all, IoDirection, IoOutcome,
    ReadOutcome,
};
pub use loopcell::LoopCell;
pub use runtime::{
    attach, current_scheduler, detached, spawn, yield_now, IntoTaskResult, Runtime, RuntimeConfig,
    RuntimeStats, SchedKind, SchedulerRef, SuspendReason, TaskHandle, TaskState,
};
pub use seeder::{spawn_seeder, spawn_seeder_with_oracle, SeederConfig, SeederHandle, SeederStats};
pub use store::{ContentStore, StoreError};
pub use sync::{sleep, with_timeout, AbortToken, CondVar, TimeoutOutcome};
