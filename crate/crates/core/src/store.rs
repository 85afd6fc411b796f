//! Read-only memory-mapped content that seeder sessions serve from.

use std::io;
use std::os::fd::AsRawFd;
use std::path::Path;

use sha1::{Digest, Sha1};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("piece length must be a power of two, got {0}")]
    PieceLength(u32),
    #[error("content must not be empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An immutable, page-mapped blob of content plus its identity hash.
///
/// The mapping is private and read-only; the kernel pages it in on demand,
/// which is what the hybrid send path probes for. The info hash is the
/// SHA-1 of the full content.
pub struct ContentStore {
    base: *const u8,
    len: usize,
    piece_length: u32,
    info_hash: [u8; 20],
}

// The mapping is immutable for the store's whole life, so shared references
// from any thread are fine.
unsafe impl Send for ContentStore {}
unsafe impl Sync for ContentStore {}

impl ContentStore {
    /// Maps `path` read-only.
    pub fn open(path: &Path, piece_length: u32) -> Result<Self, StoreError> {
        validate_piece_length(piece_length)?;
        let file = std::fs::File::open(path)?;
        let len = file.metadata()?.len();
        if len == 0 {
            return Err(StoreError::Empty);
        }
        let len = usize::try_from(len).map_err(|_| {
            StoreError::Io(io::Error::new(
                io::ErrorKind::InvalidInput,
                "content too large to map",
            ))
        })?;
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ,
                libc::MAP_PRIVATE,
                file.as_raw_fd(),
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(StoreError::Io(io::Error::last_os_error()));
        }
        Ok(Self::finish(base as *const u8, len, piece_length))
    }

    /// Builds an anonymous store from in-memory bytes. Intended for tests
    /// and synthetic benchmark content.
    pub fn from_bytes(data: &[u8], piece_length: u32) -> Result<Self, StoreError> {
        validate_piece_length(piece_length)?;
        if data.is_empty() {
            return Err(StoreError::Empty);
        }
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                data.len(),
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(StoreError::Io(io::Error::last_os_error()));
        }
        unsafe {
            std::ptr::copy_nonoverlapping(data.as_ptr(), base as *mut u8, data.len());
            if libc::mprotect(base, data.len(), libc::PROT_READ) != 0 {
                let err = io::Error::last_os_error();
                libc::munmap(base, data.len());
                return Err(StoreError::Io(err));
            }
        }
        Ok(Self::finish(base as *const u8, data.len(), piece_length))
    }

    fn finish(base: *const u8, len: usize, piece_length: u32) -> Self {
        let content = unsafe { std::slice::from_raw_parts(base, len) };
        let mut hasher = Sha1::new();
        hasher.update(content);
        let info_hash: [u8; 20] = hasher.finalize().into();
        ContentStore {
            base,
            len,
            piece_length,
            info_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        // Construction rejects empty content.
        false
    }

    pub fn piece_length(&self) -> u32 {
        self.piece_length
    }

    pub fn piece_count(&self) -> u32 {
        (self.len as u64).div_ceil(self.piece_length as u64) as u32
    }

    pub fn info_hash(&self) -> [u8; 20] {
        self.info_hash
    }

    /// Bounds-checked view of `len` bytes starting at `offset`.
    pub fn slice(&self, offset: u64, len: usize) -> Option<&[u8]> {
        let offset = usize::try_from(offset).ok()?;
        let end = offset.checked_add(len)?;
        if end > self.len {
            return None;
        }
        Some(unsafe { std::slice::from_raw_parts(self.base.add(offset), len) })
    }

    pub(crate) fn base_ptr(&self) -> *const u8 {
        self.base
    }
}

impl Drop for ContentStore {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.base as *mut libc::c_void, self.len);
        }
    }
}

impl std::fmt::Debug for ContentStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContentStore")
            .field("len", &self.len)
            .field("piece_length", &self.piece_length)
            .field("info_hash", &hex(&self.info_hash))
            .finish()
    }
}

fn validate_piece_length(piece_length: u32) -> Result<(), StoreError> {
    if piece_length.count_ones() != 1 {
        return Err(StoreError::PieceLength(piece_length));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
