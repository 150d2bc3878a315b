//! Baseline transports behind one [`Channel`] interface.
//!
//! Three channel families exchange [`Envelope`] frames between two
//! endpoints on the same host:
//!
//! - [`fifo`]: two named pipes, one per direction (`<base>.c2s`,
//!   `<base>.s2c`), blocking reads and writes.
//! - [`uds`]: a single bidirectional Unix domain socket at `<base>.sock`.
//! - [`shm`]: two file-backed shared-memory mailboxes (`<base>.c2s.shm`,
//!   `<base>.s2c.shm`), each a one-slot buffer polled on a status word.
//!
//! Delivery is FIFO per direction: envelopes arrive in send order, none
//! dropped, none duplicated. The creating endpoint (server role) removes
//! every filesystem object it created on close. The protection-key channel
//! shares this interface but lives in [`crate::mpk`] because its endpoints
//! are threads of one process rather than filesystem peers.

pub mod fifo;
pub mod mitm;
pub mod shm;
pub mod uds;

use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::codec::{self, CodecError, Envelope};

pub use fifo::open_fifo_pair;
pub use mitm::MitmChannel;
pub use shm::open_shm;
pub use uds::open_uds;

/// Which transport a [`ChannelConfig`] selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransportKind {
    Fifo,
    Uds,
    Shm,
    Mpk,
}

impl TransportKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransportKind::Fifo => "fifo",
            TransportKind::Uds => "uds",
            TransportKind::Shm => "shm",
            TransportKind::Mpk => "mpk",
        }
    }
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(TransportKind::Fifo),
            "uds" => Ok(TransportKind::Uds),
            "shm" => Ok(TransportKind::Shm),
            "mpk" => Ok(TransportKind::Mpk),
            other => Err(format!("unknown transport '{other}' (expected fifo|uds|shm|mpk)")),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which side of the channel this endpoint is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// Everything needed to open one endpoint of a channel.
#[derive(Debug, Clone)]
pub struct ChannelConfig {
    pub transport: TransportKind,
    pub role: Role,
    /// Base path for the OS objects; each transport appends its suffixes.
    pub base: PathBuf,
    /// Shared-memory region size per direction (shm only).
    pub buffer_capacity: usize,
    /// Sleep between polls once spinning gives up (shm/mpk).
    pub poll_interval: Duration,
    /// Upper bound on accepted frame size, a guard against corrupt length
    /// prefixes allocating gigabytes.
    pub max_message: usize,
}

impl ChannelConfig {
    pub const DEFAULT_BUFFER_CAPACITY: usize = 1 << 20; // 1 MiB
    pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_micros(50);
    pub const DEFAULT_MAX_MESSAGE: usize = 1 << 30; // 1 GiB

    pub fn new(transport: TransportKind, role: Role, base: impl Into<PathBuf>) -> Self {
        ChannelConfig {
            transport,
            role,
            base: base.into(),
            buffer_capacity: Self::DEFAULT_BUFFER_CAPACITY,
            poll_interval: Self::DEFAULT_POLL_INTERVAL,
            max_message: Self::DEFAULT_MAX_MESSAGE,
        }
    }

    pub fn with_buffer_capacity(mut self, bytes: usize) -> Self {
        self.buffer_capacity = bytes;
        self
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    fn validate(&self) -> Result<(), ChannelError> {
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) as usize };
        if self.buffer_capacity < 4096 || self.buffer_capacity % page != 0 {
            return Err(ChannelError::BadConfig(
                "buffer_capacity must be >= 4096 and a multiple of the page size",
            ));
        }
        if self.poll_interval < Duration::from_micros(1) {
            return Err(ChannelError::BadConfig("poll_interval must be >= 1 microsecond"));
        }
        Ok(())
    }
}

/// Errors common to all transports.
#[derive(Debug, Error)]
pub enum ChannelError {
    /// An OS path could not be created or opened.
    #[error("path unavailable: {0}")]
    PathUnavailable(String),
    /// No listener at the socket path.
    #[error("connection refused: {0}")]
    ConnectRefused(String),
    /// Shared-memory object missing or not creatable.
    #[error("shared-memory name unavailable: {0}")]
    NameUnavailable(String),
    /// The peer closed the channel; no further messages will arrive.
    #[error("peer closed the channel")]
    PeerClosed,
    /// The peer vanished while a transfer was in flight.
    #[error("peer gone mid-transfer")]
    PeerGone,
    /// The framed envelope does not fit the transport's buffer.
    #[error("message of {size} bytes exceeds capacity {capacity}")]
    MessageTooLarge { size: usize, capacity: usize },
    /// Received bytes failed to decode; indicates corruption.
    #[error("decode error: {0}")]
    Decode(#[from] CodecError),
    /// Invalid channel configuration.
    #[error("bad channel config: {0}")]
    BadConfig(&'static str),
    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A bidirectional message endpoint. One thread owns an endpoint at a time;
/// the peer endpoint lives in another thread or process.
pub trait Channel: Send {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError>;
    fn recv(&mut self) -> Result<Envelope, ChannelError>;
    /// Idempotent. The creating endpoint removes its OS artifacts here;
    /// dropping the endpoint closes implicitly.
    fn close(&mut self) -> Result<(), ChannelError>;
}

impl<C: Channel + ?Sized> Channel for Box<C> {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        (**self).send(envelope)
    }

    fn recv(&mut self) -> Result<Envelope, ChannelError> {
        (**self).recv()
    }

    fn close(&mut self) -> Result<(), ChannelError> {
        (**self).close()
    }
}

/// Open a filesystem-backed channel endpoint. Protection-key channels are
/// created in pairs via [`crate::mpk::create_pair`] instead.
pub fn open_channel(cfg: &ChannelConfig) -> Result<Box<dyn Channel>, ChannelError> {
    match cfg.transport {
        TransportKind::Fifo => Ok(Box::new(open_fifo_pair(cfg)?)),
        TransportKind::Uds => Ok(Box::new(open_uds(cfg)?)),
        TransportKind::Shm => Ok(Box::new(open_shm(cfg)?)),
        TransportKind::Mpk => Err(ChannelError::BadConfig(
            "mpk channels are created in pairs, not opened by path",
        )),
    }
}

/// Write one frame to a byte stream.
fn write_frame(w: &mut impl Write, envelope: &Envelope) -> Result<(), ChannelError> {
    let bytes = codec::encode(envelope)?;
    match w.write_all(&bytes).and_then(|_| w.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Err(ChannelError::PeerClosed),
        Err(e) => Err(e.into()),
    }
}

/// Read one frame from a byte stream. A clean EOF at a frame boundary is
/// [`ChannelError::PeerClosed`].
fn read_frame(r: &mut impl Read, max_message: usize) -> Result<Envelope, ChannelError> {
    let mut prefix = [0u8; 4];
    match r.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(ChannelError::PeerClosed)
        }
        Err(e) => return Err(e.into()),
    }
    let body_len = u32::from_be_bytes(prefix) as usize;
    if body_len.saturating_add(4) > max_message {
        return Err(ChannelError::MessageTooLarge { size: body_len + 4, capacity: max_message });
    }
    let mut body = vec![0u8; body_len];
    match r.read_exact(&mut body) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(ChannelError::PeerGone)
        }
        Err(e) => return Err(e.into()),
    }
    Ok(codec::decode_body(&body)?)
}

/// Mailbox status values shared by the shm transport and the mpk channel.
pub(crate) mod status {
    pub const EMPTY: u32 = 0;
    pub const READY: u32 = 1;
    /// Terminal; written by a closing endpoint so the peer's polls return
    /// instead of spinning forever.
    pub const CLOSED: u32 = 2;
}

/// Spin-then-sleep polling loop for mailbox status words.
pub(crate) struct Poller {
    interval: Duration,
}

impl Poller {
    const SPINS: u32 = 4096;
    const YIELDS: u32 = 256;

    pub(crate) fn new(interval: Duration) -> Self {
        Poller { interval }
    }

    /// Call `load` until `accept` returns `Some`. Spins briefly, yields,
    /// then sleeps `interval` per retry.
    pub(crate) fn wait<T>(
        &self,
        mut load: impl FnMut() -> u32,
        accept: impl Fn(u32) -> Option<T>,
    ) -> T {
        for _ in 0..Self::SPINS {
            if let Some(v) = accept(load()) {
                return v;
            }
            std::hint::spin_loop();
        }
        loop {
            for _ in 0..Self::YIELDS {
                if let Some(v) = accept(load()) {
                    return v;
                }
                std::thread::yield_now();
            }
            if let Some(v) = accept(load()) {
                return v;
            }
            std::thread::sleep(self.interval);
        }
    }
}
