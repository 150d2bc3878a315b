//! Paired named pipes, one per direction.
//!
//! The server creates `<base>.c2s` and `<base>.s2c` with `mkfifo` and
//! unlinks them on close. Opening is a rendezvous: both sides open the
//! client-to-server pipe first, then the other, so the blocking FIFO opens
//! pair up instead of deadlocking. The client retries briefly while the
//! server has not created the pipes yet.

use std::ffi::CString;
use std::fs::{File, OpenOptions};
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::codec::Envelope;

use super::{read_frame, write_frame, Channel, ChannelConfig, ChannelError, Role};

const CLIENT_OPEN_RETRY: Duration = Duration::from_secs(5);

/// Both directions of a named-pipe channel.
pub struct FifoChannel {
    reader: File,
    writer: File,
    /// Paths to unlink on close (server role only).
    owned: Vec<PathBuf>,
    max_message: usize,
    closed: bool,
}

/// Open one endpoint per `cfg`. The server must be opening (or already
/// open) for the client's open to complete.
pub fn open_fifo_pair(cfg: &ChannelConfig) -> Result<FifoChannel, ChannelError> {
    let c2s = suffixed(&cfg.base, ".c2s");
    let s2c = suffixed(&cfg.base, ".s2c");
    match cfg.role {
        Role::Server => {
            for path in [&c2s, &s2c] {
                let _ = std::fs::remove_file(path);
                mkfifo(path)?;
            }
            // c2s read end first; the client opens its write end first.
            let reader = open_blocking(&c2s, false)?;
            let writer = open_blocking(&s2c, true)?;
            Ok(FifoChannel {
                reader,
                writer,
                owned: vec![c2s, s2c],
                max_message: cfg.max_message,
                closed: false,
            })
        }
        Role::Client => {
            let writer = open_with_retry(&c2s, true)?;
            let reader = open_with_retry(&s2c, false)?;
            Ok(FifoChannel { reader, writer, owned: Vec::new(), max_message: cfg.max_message, closed: false })
        }
    }
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn mkfifo(path: &Path) -> Result<(), ChannelError> {
    let cpath = CString::new(path.as_os_str().as_bytes())
        .map_err(|_| ChannelError::PathUnavailable(path.display().to_string()))?;
    let r = unsafe { libc::mkfifo(cpath.as_ptr(), 0o600) };
    if r == 0 {
        Ok(())
    } else {
        Err(ChannelError::PathUnavailable(format!(
            "mkfifo {}: {}",
            path.display(),
            std::io::Error::last_os_error()
        )))
    }
}

fn open_blocking(path: &Path, write: bool) -> Result<File, ChannelError> {
    OpenOptions::new()
        .read(!write)
        .write(write)
        .open(path)
        .map_err(|e| ChannelError::PathUnavailable(format!("{}: {e}", path.display())))
}

/// The client may race the server's mkfifo; retry on a missing path.
fn open_with_retry(path: &Path, write: bool) -> Result<File, ChannelError> {
    let deadline = Instant::now() + CLIENT_OPEN_RETRY;
    loop {
        match OpenOptions::new().read(!write).write(write).open(path) {
            Ok(f) => return Ok(f),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => {
                return Err(ChannelError::PathUnavailable(format!("{}: {e}", path.display())))
            }
        }
    }
}

impl Channel for FifoChannel {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        write_frame(&mut self.writer, envelope)
    }

    fn recv(&mut self) -> Result<Envelope, ChannelError> {
        read_frame(&mut self.reader, self.max_message)
    }

    fn close(&mut self) -> Result<(), ChannelError> {
        if !self.closed {
            self.closed = true;
            for path in self.owned.drain(..) {
                let _ = std::fs::remove_file(path);
            }
        }
        Ok(())
    }
}

impl Drop for FifoChannel {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
