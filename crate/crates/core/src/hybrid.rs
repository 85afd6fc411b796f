//! The hybrid disk send path: serve page-cache hits cooperatively, push
//! cache misses to the thread pool where they may block.

use std::os::fd::RawFd;
use std::sync::Arc;

use crate::error::RtError;
use crate::io::write_all;
use crate::runtime::{detached, yield_now};
use crate::store::ContentStore;

#[derive(Debug, thiserror::Error)]
pub enum RegionError {
    #[error("region is empty")]
    Empty,
    #[error("region {offset}+{length} exceeds store length {store_len}")]
    OutOfBounds {
        offset: u64,
        length: usize,
        store_len: usize,
    },
}

/// A validated byte range of a [`ContentStore`].
#[derive(Clone)]
pub struct FileRegion {
    store: Arc<ContentStore>,
    offset: u64,
    length: usize,
}

impl FileRegion {
    pub fn new(store: Arc<ContentStore>, offset: u64, length: usize) -> Result<Self, RegionError> {
        if length == 0 {
            return Err(RegionError::Empty);
        }
        let store_len = store.len();
        let in_bounds = usize::try_from(offset)
            .ok()
            .and_then(|o| o.checked_add(length))
            .is_some_and(|end| end <= store_len);
        if !in_bounds {
            return Err(RegionError::OutOfBounds {
                offset,
                length,
                store_len,
            });
        }
        Ok(FileRegion {
            store,
            offset,
            length,
        })
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        // Construction rejects empty regions.
        false
    }

    /// The region's bytes. Always valid: bounds were checked at construction
    /// and the mapping is immutable.
    pub fn data(&self) -> &[u8] {
        self.store
            .slice(self.offset, self.length)
            .expect("region validated at construction")
    }

    /// Page-aligned (address, byte length) covering the region.
    fn page_span(&self) -> (usize, usize) {
        let page = page_size();
        let addr = self.store.base_ptr() as usize + self.offset as usize;
        let start = addr & !(page - 1);
        let end = (addr + self.length).div_ceil(page) * page;
        (start, end - start)
    }
}

impl std::fmt::Debug for FileRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileRegion")
            .field("offset", &self.offset)
            .field("length", &self.length)
            .finish()
    }
}

fn page_size() -> usize {
    unsafe { libc::sysconf(libc::_SC_PAGESIZE) as usize }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    Resident,
    NotResident,
}

/// Answers "are these pages in memory?" and "please start paging them in".
///
/// The OS-backed implementation asks the kernel; scripted implementations
/// let tests drive every branch of the send path deterministically.
pub trait ResidencyOracle: Send + Sync {
    fn probe(&self, region: &FileRegion) -> Residency;

    /// Hints the kernel to start reading the region in. Best effort.
    fn prefetch(&self, region: &FileRegion);
}

/// Kernel-backed oracle using `mincore` and `posix_madvise`.
pub struct OsResidency;

impl ResidencyOracle for OsResidency {
    fn probe(&self, region: &FileRegion) -> Residency {
        let (start, span) = region.page_span();
        let pages = span / page_size();
        let mut vec = vec![0u8; pages];
        let rc = unsafe { libc::mincore(start as *mut libc::c_void, span, vec.as_mut_ptr()) };
        if rc != 0 {
            // Pessimism keeps the loop safe: an unprobeable page is treated
            // as a potential disk stall and routed to the pool.
            log::warn!("mincore failed: {}", std::io::Error::last_os_error());
            return Residency::NotResident;
        }
        if vec.iter().all(|page| page & 1 == 1) {
            Residency::Resident
        } else {
            Residency::NotResident
        }
    }

    fn prefetch(&self, region: &FileRegion) {
        let (start, span) = region.page_span();
        let rc = unsafe {
            libc::posix_madvise(
                start as *mut libc::c_void,
                span,
                libc::POSIX_MADV_WILLNEED,
            )
        };
        if rc != 0 {
            log::debug!(
                "madvise(WILLNEED) failed: {}",
                std::io::Error::from_raw_os_error(rc)
            );
        }
    }
}

/// Scripted oracle for tests: successive probes pop scripted answers and
/// fall back to a default once the script is exhausted.
pub struct ScriptedResidency {
    script: parking_lot::Mutex<std::collections::VecDeque<Residency>>,
    fallback: Residency,
    probes: std::sync::atomic::AtomicUsize,
    prefetches: std::sync::atomic::AtomicUsize,
}

impl ScriptedResidency {
    pub fn new(script: Vec<Residency>, fallback: Residency) -> Self {
        ScriptedResidency {
            script: parking_lot::Mutex::new(script.into()),
            fallback,
            probes: std::sync::atomic::AtomicUsize::new(0),
            prefetches: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn probes(&self) -> usize {
        self.probes.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn prefetches(&self) -> usize {
        self.prefetches.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl ResidencyOracle for ScriptedResidency {
    fn probe(&self, _region: &FileRegion) -> Residency {
        self.probes
            .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.script.lock().pop_front().unwrap_or(self.fallback)
    }

    fn prefetch(&self, _region: &FileRegion) {
        self.prefetches
            .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    }
}

/// Which route a [`send_file_chunk`] call took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendPath {
    /// Pages were resident on the first probe; served cooperatively.
    AttachedImmediate,
    /// Pages arrived during one extra yield; served cooperatively.
    AttachedAfterRetry,
    /// Pages stayed cold; the write ran detached so a stall blocks only a
    /// pool worker.
    Detached,
}

/// Sends one region to `fd` without ever letting a page fault stall the
/// event loop.
///
/// The sequence is: hint the kernel to page the region in, yield one slice
/// so the readahead can progress, then probe. Resident pages are written
/// attached, touching them cannot block. A miss gets one more yield and one
/// more probe; pages still cold after that are written from detached mode.
/// Every call yields once or twice and dispatches to the pool only on the
/// cold path.
pub async fn send_file_chunk(
    fd: RawFd,
    region: &FileRegion,
    oracle: &dyn ResidencyOracle,
) -> Result<SendPath, RtError> {
    oracle.prefetch(region);
    yield_now().await?;
    if oracle.probe(region) == Residency::Resident {
        write_all(fd, region.data()).await?;
        return Ok(SendPath::AttachedImmediate);
    }
    yield_now().await?;
    if oracle.probe(region) == Residency::Resident {
        write_all(fd, region.data()).await?;
        return Ok(SendPath::AttachedAfterRetry);
    }
    detached(async { write_all(fd, region.data()).await }).await??;
    Ok(SendPath::Detached)
}
