//! Loop-confined shared state.
//!
//! Attached tasks are serialized on the event-loop thread and never
//! interleave between suspension points, so state they share needs no lock.
//! [`LoopCell`] is the container that makes this sharable across task
//! boundaries: it can be put in an `Arc` and captured by many tasks, but all
//! access goes through [`LoopCell::with`], which pins the cell to the first
//! accessing thread and panics if any other thread touches it. Since a
//! closure cannot contain an `.await`, the borrow handed to `with` is
//! guaranteed to end before the task can suspend.

use std::cell::RefCell;
use std::sync::OnceLock;
use std::thread::{self, ThreadId};

pub struct LoopCell<T> {
    cell: RefCell<T>,
    owner: OnceLock<ThreadId>,
}

// Sound: all access is funneled through `with`, which enforces that every
// borrow happens on a single thread for the lifetime of the cell.
unsafe impl<T: Send> Sync for LoopCell<T> {}

impl<T> LoopCell<T> {
    pub const fn new(value: T) -> Self {
        LoopCell {
            cell: RefCell::new(value),
            owner: OnceLock::new(),
        }
    }

    /// Runs `f` with exclusive access to the contents.
    ///
    /// Panics if called from a thread other than the one that first accessed
    /// the cell, or reentrantly from within another `with` on the same cell.
    pub fn with<R>(&self, f: impl FnOnce(&mut T) -> R) -> R {
        let me = thread::current().id();
        let owner = *self.owner.get_or_init(|| me);
        assert_eq!(
            owner, me,
            "LoopCell accessed from two different threads; \
             it may only be used by attached tasks of one event loop"
        );
        let mut borrow = self.cell.borrow_mut();
        f(&mut borrow)
    }

    pub fn into_inner(self) -> T {
        self.cell.into_inner()
    }
}

impl<T: Default> Default for LoopCell<T> {
    fn default() -> Self {
        LoopCell::new(T::default())
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for LoopCell<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.cell.try_borrow() {
            Ok(v) => f.debug_tuple("LoopCell").field(&*v).finish(),
            Err(_) => f.write_str("LoopCell(<borrowed>)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn single_thread_access_works() {
        let c = LoopCell::new(1u32);
        c.with(|v| *v += 1);
        assert_eq!(c.with(|v| *v), 2);
    }

    #[test]
    fn cross_thread_access_panics() {
        let c = Arc::new(LoopCell::new(0u32));
        c.with(|v| *v = 7);
        let c2 = Arc::clone(&c);
        let res = thread::spawn(move || {
            let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                c2.with(|v| *v);
            }));
            caught.is_err()
        })
        .join()
        .unwrap();
        assert!(res, "second thread should have been rejected");
    }

    #[test]
    fn reentrant_access_panics() {
        let c = LoopCell::new(0u32);
        let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            c.with(|_| {
                c.with(|v| *v);
            });
        }));
        assert!(caught.is_err());
    }
}
