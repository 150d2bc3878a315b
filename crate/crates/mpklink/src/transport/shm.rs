//! Dual-region polled shared memory.
//!
//! Each direction is one file-backed mailbox (`<base>.c2s.shm`,
//! `<base>.s2c.shm`) laid out as:
//!
//! ```text
//! ┌────────────┬──────────────┬───────────────┐
//! │ status u32 │ length u32BE │ message bytes │
//! └────────────┴──────────────┴───────────────┘
//! ```
//!
//! The status word is toggled Empty -> Ready by the writer and Ready ->
//! Empty by the reader, always by compare-and-swap with release/acquire
//! ordering; a closing endpoint parks it at Closed so the peer's polls
//! terminate. The slot holds one whole framed envelope, which is why this
//! baseline cannot carry messages larger than `capacity - 8` — the chunked
//! protection-key channel in [`crate::mpk`] exists to lift that limit.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::{Duration, Instant};

use crate::codec::{self, Envelope};

use super::{status, Channel, ChannelConfig, ChannelError, Poller, Role};

const HEADER: usize = 8;
const CLOSE_DRAIN: Duration = Duration::from_millis(250);

struct MappedRegion {
    ptr: *mut u8,
    len: usize,
    path: PathBuf,
    owner: bool,
}

unsafe impl Send for MappedRegion {}

impl MappedRegion {
    fn create(path: &Path, len: usize) -> Result<Self, ChannelError> {
        let _ = std::fs::remove_file(path); // stale region from a previous run
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| ChannelError::NameUnavailable(format!("{}: {e}", path.display())))?;
        file.set_len(len as u64)
            .map_err(|e| ChannelError::NameUnavailable(format!("{}: {e}", path.display())))?;
        Self::map(file, path, len, true)
    }

    fn open(path: &Path, len: usize) -> Result<Self, ChannelError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(|e| ChannelError::NameUnavailable(format!("{}: {e}", path.display())))?;
        let actual = file.metadata().map(|m| m.len()).unwrap_or(0);
        if actual != len as u64 {
            return Err(ChannelError::BadConfig("buffer_capacity differs between endpoints"));
        }
        Self::map(file, path, len, false)
    }

    fn map(file: std::fs::File, path: &Path, len: usize, owner: bool) -> Result<Self, ChannelError> {
        use std::os::unix::io::AsRawFd;
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                file.as_raw_fd(),
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(ChannelError::NameUnavailable(format!(
                "mmap {}: {}",
                path.display(),
                std::io::Error::last_os_error()
            )));
        }
        Ok(MappedRegion { ptr: ptr as *mut u8, len, path: path.to_path_buf(), owner })
    }

    fn status(&self) -> &AtomicU32 {
        unsafe { &*(self.ptr as *const AtomicU32) }
    }

    fn write_message(&self, frame: &[u8]) {
        debug_assert!(HEADER + frame.len() <= self.len);
        unsafe {
            let len_be = (frame.len() as u32).to_be_bytes();
            std::ptr::copy_nonoverlapping(len_be.as_ptr(), self.ptr.add(4), 4);
            std::ptr::copy_nonoverlapping(frame.as_ptr(), self.ptr.add(HEADER), frame.len());
        }
    }

    fn read_message(&self) -> Result<Vec<u8>, ChannelError> {
        let mut len_be = [0u8; 4];
        unsafe {
            std::ptr::copy_nonoverlapping(self.ptr.add(4), len_be.as_mut_ptr(), 4);
        }
        let len = u32::from_be_bytes(len_be) as usize;
        if HEADER + len > self.len {
            return Err(ChannelError::Decode(codec::CodecError::Malformed(
                "shared-memory length field exceeds region",
            )));
        }
        let mut frame = vec![0u8; len];
        unsafe {
            std::ptr::copy_nonoverlapping(self.ptr.add(HEADER), frame.as_mut_ptr(), len);
        }
        Ok(frame)
    }

    /// Park the status at Closed. Gives the reader a short window to drain
    /// a pending message when `drain` is set.
    fn mark_closed(&self, drain: bool) {
        let deadline = Instant::now() + CLOSE_DRAIN;
        loop {
            let current = self.status().load(Ordering::Acquire);
            if current == status::CLOSED {
                return;
            }
            if current == status::READY && drain && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(1));
                continue;
            }
            if self
                .status()
                .compare_exchange(current, status::CLOSED, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return;
            }
        }
    }
}

impl Drop for MappedRegion {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.cast(), self.len);
        }
        if self.owner {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

/// One endpoint of the dual-region shared-memory channel.
pub struct ShmChannel {
    outbound: MappedRegion,
    inbound: MappedRegion,
    poller: Poller,
    capacity: usize,
    max_message: usize,
    closed: bool,
}

pub fn open_shm(cfg: &ChannelConfig) -> Result<ShmChannel, ChannelError> {
    cfg.validate()?;
    let c2s = region_path(&cfg.base, ".c2s.shm");
    let s2c = region_path(&cfg.base, ".s2c.shm");
    let (outbound, inbound) = match cfg.role {
        Role::Server => (
            MappedRegion::create(&s2c, cfg.buffer_capacity)?,
            MappedRegion::create(&c2s, cfg.buffer_capacity)?,
        ),
        Role::Client => (
            MappedRegion::open(&c2s, cfg.buffer_capacity)?,
            MappedRegion::open(&s2c, cfg.buffer_capacity)?,
        ),
    };
    Ok(ShmChannel {
        outbound,
        inbound,
        poller: Poller::new(cfg.poll_interval),
        capacity: cfg.buffer_capacity,
        max_message: cfg.max_message,
        closed: false,
    })
}

fn region_path(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

impl Channel for ShmChannel {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        if self.closed {
            return Err(ChannelError::PeerClosed);
        }
        let frame = codec::encode(envelope)?;
        if frame.len() > self.capacity - HEADER {
            return Err(ChannelError::MessageTooLarge {
                size: frame.len(),
                capacity: self.capacity - HEADER,
            });
        }
        if frame.len() > self.max_message {
            return Err(ChannelError::MessageTooLarge { size: frame.len(), capacity: self.max_message });
        }
        let cell = self.outbound.status();
        loop {
            self.poller
                .wait(
                    || cell.load(Ordering::Acquire),
                    |s| match s {
                        status::EMPTY => Some(Ok(())),
                        status::CLOSED => Some(Err(ChannelError::PeerGone)),
                        _ => None,
                    },
                )?;
            self.outbound.write_message(&frame);
            match cell.compare_exchange(status::EMPTY, status::READY, Ordering::Release, Ordering::Acquire) {
                Ok(_) => return Ok(()),
                Err(status::CLOSED) => return Err(ChannelError::PeerGone),
                Err(_) => continue, // lost a race; re-wait
            }
        }
    }

    fn recv(&mut self) -> Result<Envelope, ChannelError> {
        if self.closed {
            return Err(ChannelError::PeerClosed);
        }
        let cell = self.inbound.status();
        self.poller.wait(
            || cell.load(Ordering::Acquire),
            |s| match s {
                status::READY => Some(Ok(())),
                status::CLOSED => Some(Err(ChannelError::PeerClosed)),
                _ => None,
            },
        )?;
        let frame = self.inbound.read_message()?;
        let swapped =
            cell.compare_exchange(status::READY, status::EMPTY, Ordering::Release, Ordering::Acquire);
        debug_assert!(swapped.is_ok(), "reader lost the Ready slot");
        if frame.len() > self.max_message {
            return Err(ChannelError::MessageTooLarge { size: frame.len(), capacity: self.max_message });
        }
        Ok(codec::decode(&frame)?)
    }

    fn close(&mut self) -> Result<(), ChannelError> {
        if !self.closed {
            self.closed = true;
            self.outbound.mark_closed(true);
            self.inbound.mark_closed(false);
        }
        Ok(())
    }
}

impl Drop for ShmChannel {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
