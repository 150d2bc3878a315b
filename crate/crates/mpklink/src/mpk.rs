//! Shared-memory channel between two threads of one process, with each
//! lane's data buffer tagged by its own protection key.
//!
//! A pair has two directional lanes. Each lane is a key-protected data
//! buffer plus an always-accessible status cell (status word, chunk length,
//! last-chunk flag) and a [`RegisterSlot`] through which rights changes are
//! published to the peer. Envelopes are split into chunks of at most
//! `chunk_capacity` bytes and streamed through the one-slot mailbox, so a
//! message may exceed the lane buffer — the capability the plain
//! shared-memory baseline lacks.
//!
//! The [`RightsPolicy`] decides when protection-key rights are toggled:
//!
//! - `Strict`: the writer holds ReadWrite on its outbound lane only while
//!   writing a chunk and NoAccess otherwise; the reader symmetrically takes
//!   ReadOnly around each copy. Outside a send/recv call, every thread
//!   holds NoAccess on both data buffers.
//! - `Relaxed`: each endpoint takes ReadWrite on its outbound lane and
//!   ReadOnly on its inbound lane once, on first use, and keeps them for
//!   the session. The latency delta between the two policies is the cost
//!   of synchronizing rights per chunk.
//!
//! Endpoints must stay within one process: rights live in a thread-local
//! register, so the pair is created once and the two endpoints are moved to
//! their threads. Cross-process use is rejected by construction (there is
//! no by-path open).

use std::sync::atomic::{AtomicU32, AtomicU8, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::{self, Envelope};
use crate::protection::{
    tag_region, AccessMode, AccessRegister, AccessRights, BackendChoice, BackendKind, KeyHandle,
    PageBuffer, ProbeOutcome, ProtectedRegion, ProtectionDomain, ProtectionError, RegisterSlot,
};
use crate::transport::{status, Channel, ChannelError, Poller};

/// When protection-key rights are raised and lowered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum RightsPolicy {
    #[default]
    Strict,
    Relaxed,
}

impl RightsPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            RightsPolicy::Strict => "strict",
            RightsPolicy::Relaxed => "relaxed",
        }
    }
}

impl std::str::FromStr for RightsPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(RightsPolicy::Strict),
            "relaxed" => Ok(RightsPolicy::Relaxed),
            other => Err(format!("unknown policy '{other}' (expected strict|relaxed)")),
        }
    }
}

impl std::fmt::Display for RightsPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Settings for [`create_pair`]; the `mpk.*` configuration values.
#[derive(Debug, Clone)]
pub struct MpkChannelConfig {
    /// Per-lane data buffer size; a positive multiple of the page size.
    pub buffer_bytes: usize,
    /// Maximum bytes streamed per chunk; at most `buffer_bytes`.
    pub chunk_capacity: usize,
    pub policy: RightsPolicy,
    pub backend: BackendChoice,
    /// Record rights transitions for [`MpkEndpoint::rights_trace`].
    pub trace: bool,
    pub poll_interval: Duration,
}

impl MpkChannelConfig {
    pub const DEFAULT_CHUNK_CAPACITY: usize = 256 << 10;
}

impl Default for MpkChannelConfig {
    fn default() -> Self {
        MpkChannelConfig {
            buffer_bytes: Self::DEFAULT_CHUNK_CAPACITY,
            chunk_capacity: Self::DEFAULT_CHUNK_CAPACITY,
            policy: RightsPolicy::default(),
            backend: BackendChoice::Auto,
            trace: false,
            poll_interval: Duration::from_micros(50),
        }
    }
}

/// Errors from pair creation and the trace accessor; channel traffic itself
/// reports [`ChannelError`] like every other transport.
#[derive(Debug, Error)]
pub enum MpkError {
    #[error(transparent)]
    Protection(#[from] ProtectionError),
    #[error("bad channel config: {0}")]
    BadConfig(&'static str),
    #[error("rights tracing was not enabled at create_pair")]
    TracingDisabled,
}

/// Which lane of the pair, relative to an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneDir {
    Outbound,
    Inbound,
}

/// One recorded rights transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub lane: LaneDir,
    pub action: TraceAction,
    pub rights: AccessRights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceAction {
    Raise,
    Lower,
}

struct Lane {
    region: ProtectedRegion,
    status: AtomicU32,
    chunk_len: AtomicU32,
    last_chunk: AtomicU8,
    slot: RegisterSlot,
}

impl Lane {
    fn new(region: ProtectedRegion) -> Self {
        Lane {
            region,
            status: AtomicU32::new(status::EMPTY),
            chunk_len: AtomicU32::new(0),
            last_chunk: AtomicU8::new(0),
            slot: RegisterSlot::new(),
        }
    }

    fn key(&self) -> &KeyHandle {
        self.region.key()
    }

    /// Park the status at Closed; same protocol as the shm transport.
    fn park_closed(&self, drain: bool) {
        let deadline = Instant::now() + Duration::from_millis(250);
        loop {
            let current = self.status.load(Ordering::Acquire);
            if current == status::CLOSED {
                return;
            }
            if current == status::READY && drain && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(1));
                continue;
            }
            if self
                .status
                .compare_exchange(current, status::CLOSED, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return;
            }
        }
    }
}

struct PairShared {
    c2s: Lane,
    s2c: Lane,
    domain: ProtectionDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Client,
    Server,
}

/// Per-backend process-wide domain, so concurrent pairs share the
/// architectural budget of 15 allocatable keys.
fn process_domain(choice: BackendChoice) -> Result<ProtectionDomain, ProtectionError> {
    static EMULATED: OnceLock<ProtectionDomain> = OnceLock::new();
    static HARDWARE: OnceLock<ProtectionDomain> = OnceLock::new();
    let kind = ProtectionDomain::new(choice)?.backend();
    Ok(match kind {
        BackendKind::Emulated => EMULATED
            .get_or_init(|| ProtectionDomain::new(BackendChoice::Emulated).expect("emulated domain"))
            .clone(),
        BackendKind::Hardware => HARDWARE
            .get_or_init(|| ProtectionDomain::new(BackendChoice::Hardware).expect("hardware domain"))
            .clone(),
    })
}

/// Allocate two keys, tag both lane buffers, and hand back the client and
/// server endpoints. The creating thread ends with NoAccess on both keys;
/// endpoints take the rights their policy prescribes when used.
pub fn create_pair(cfg: &MpkChannelConfig) -> Result<(MpkEndpoint, MpkEndpoint), MpkError> {
    if cfg.chunk_capacity == 0 || cfg.chunk_capacity > cfg.buffer_bytes {
        return Err(MpkError::BadConfig("chunk_capacity must be in 1..=buffer_bytes"));
    }
    if cfg.chunk_capacity > u32::MAX as usize {
        return Err(MpkError::BadConfig("chunk_capacity must fit in 32 bits"));
    }
    let domain = process_domain(cfg.backend)?;

    let c2s_key = domain.allocate_key()?;
    let s2c_key = match domain.allocate_key() {
        Ok(k) => k,
        Err(e) => {
            let _ = domain.free_key(&c2s_key);
            return Err(e.into());
        }
    };
    let c2s_region = tag_region(PageBuffer::new(cfg.buffer_bytes)?, &c2s_key)?;
    let s2c_region = tag_region(PageBuffer::new(cfg.buffer_bytes)?, &s2c_key)?;

    // The creator is not an endpoint; drop its allocation-time rights so a
    // quiescent pair is inaccessible from every thread.
    c2s_key.set_rights(AccessRights::NoAccess)?;
    s2c_key.set_rights(AccessRights::NoAccess)?;

    let shared = Arc::new(PairShared {
        c2s: Lane::new(c2s_region),
        s2c: Lane::new(s2c_region),
        domain,
    });

    let endpoint = |side| MpkEndpoint {
        shared: Arc::clone(&shared),
        side,
        policy: cfg.policy,
        chunk_capacity: cfg.chunk_capacity,
        poller: Poller::new(cfg.poll_interval),
        trace: cfg.trace.then(Vec::new),
        bound: false,
        closed: false,
        frame_tamper: None,
    };
    Ok((endpoint(Side::Client), endpoint(Side::Server)))
}

/// One side of a protection-key channel pair. Owned by exactly one thread
/// at a time; transferable between threads between operations.
pub struct MpkEndpoint {
    shared: Arc<PairShared>,
    side: Side,
    policy: RightsPolicy,
    chunk_capacity: usize,
    poller: Poller,
    trace: Option<Vec<TraceRecord>>,
    bound: bool,
    closed: bool,
    /// Test hook: corrupt the encoded frame before chunking.
    frame_tamper: Option<Box<dyn FnMut(&mut Vec<u8>) + Send>>,
}

impl MpkEndpoint {
    fn lane(&self, dir: LaneDir) -> &Lane {
        match (self.side, dir) {
            (Side::Client, LaneDir::Outbound) | (Side::Server, LaneDir::Inbound) => &self.shared.c2s,
            (Side::Client, LaneDir::Inbound) | (Side::Server, LaneDir::Outbound) => &self.shared.s2c,
        }
    }

    pub fn policy(&self) -> RightsPolicy {
        self.policy
    }

    pub fn chunk_capacity(&self) -> usize {
        self.chunk_capacity
    }

    /// Probe handle for this endpoint's outbound data buffer; usable from
    /// any thread.
    pub fn outbound_probe(&self) -> LaneProbe {
        LaneProbe { shared: Arc::clone(&self.shared), c2s: self.side == Side::Client }
    }

    /// Probe handle for this endpoint's inbound data buffer.
    pub fn inbound_probe(&self) -> LaneProbe {
        LaneProbe { shared: Arc::clone(&self.shared), c2s: self.side == Side::Server }
    }

    /// The ordered rights transitions this endpoint performed.
    pub fn rights_trace(&self) -> Result<&[TraceRecord], MpkError> {
        self.trace.as_deref().ok_or(MpkError::TracingDisabled)
    }

    /// Test hook: mutate each encoded frame after signing and before
    /// chunking, to exercise the corruption error path.
    #[doc(hidden)]
    pub fn set_frame_tamper(&mut self, f: impl FnMut(&mut Vec<u8>) + Send + 'static) {
        self.frame_tamper = Some(Box::new(f));
    }

    /// Every rights change is published into the lane's register slot so
    /// the participating threads can keep a synchronized view; this
    /// per-chunk synchronization is the cost the Strict policy measures.
    fn change_rights(&mut self, dir: LaneDir, rights: AccessRights, action: TraceAction) {
        let lane = self.lane(dir);
        let reg = lane
            .key()
            .set_rights(rights)
            .expect("lane key freed while endpoint alive");
        lane.slot.publish(&reg);
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord { lane: dir, action, rights });
        }
    }

    fn raise(&mut self, dir: LaneDir) {
        if self.policy == RightsPolicy::Strict {
            let rights = match dir {
                LaneDir::Outbound => AccessRights::ReadWrite,
                LaneDir::Inbound => AccessRights::ReadOnly,
            };
            self.change_rights(dir, rights, TraceAction::Raise);
        }
    }

    fn lower(&mut self, dir: LaneDir) {
        if self.policy == RightsPolicy::Strict {
            self.change_rights(dir, AccessRights::NoAccess, TraceAction::Lower);
        }
    }

    /// Relaxed policy takes its session rights on first use by the owning
    /// thread; rights are thread-local, so this cannot happen at create.
    fn bind_session(&mut self) {
        if self.bound {
            return;
        }
        self.bound = true;
        if self.policy == RightsPolicy::Relaxed {
            let out = self.lane(LaneDir::Outbound);
            let reg = out.key().set_rights(AccessRights::ReadWrite).expect("lane key freed");
            out.slot.publish(&reg);
            let inb = self.lane(LaneDir::Inbound);
            let reg = inb.key().set_rights(AccessRights::ReadOnly).expect("lane key freed");
            inb.slot.publish(&reg);
        }
    }
}

/// Byte ranges of a frame split into chunks: (offset, length, is_last).
fn chunk_spans(total: usize, capacity: usize) -> impl Iterator<Item = (usize, usize, bool)> {
    let count = total.div_ceil(capacity).max(1);
    (0..count).map(move |i| {
        let offset = i * capacity;
        let len = capacity.min(total - offset);
        (offset, len, i == count - 1)
    })
}

impl Channel for MpkEndpoint {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        if self.closed {
            return Err(ChannelError::PeerClosed);
        }
        self.bind_session();
        let mut frame = codec::encode(envelope)?;
        if let Some(tamper) = &mut self.frame_tamper {
            tamper(&mut frame);
        }
        for (offset, len, last) in chunk_spans(frame.len(), self.chunk_capacity) {
            self.raise(LaneDir::Outbound);
            let lane = self.lane(LaneDir::Outbound);
            let wait = self.poller.wait(
                || lane.status.load(Ordering::Acquire),
                |s| match s {
                    status::EMPTY => Some(Ok(())),
                    status::CLOSED => Some(Err(ChannelError::PeerGone)),
                    _ => None,
                },
            );
            if let Err(e) = wait {
                self.lower(LaneDir::Outbound);
                return Err(e);
            }
            let lane = self.lane(LaneDir::Outbound);
            lane.region.write_at(0, &frame[offset..offset + len]);
            lane.chunk_len.store(len as u32, Ordering::Relaxed);
            lane.last_chunk.store(last as u8, Ordering::Relaxed);
            let published = lane.status.compare_exchange(
                status::EMPTY,
                status::READY,
                Ordering::Release,
                Ordering::Acquire,
            );
            self.lower(LaneDir::Outbound);
            if published.is_err() {
                return Err(ChannelError::PeerGone);
            }
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Envelope, ChannelError> {
        if self.closed {
            return Err(ChannelError::PeerClosed);
        }
        self.bind_session();
        let mut frame = Vec::new();
        loop {
            let lane = self.lane(LaneDir::Inbound);
            let mid_stream = !frame.is_empty();
            self.poller.wait(
                || lane.status.load(Ordering::Acquire),
                |s| match s {
                    status::READY => Some(Ok(())),
                    status::CLOSED => Some(Err(if mid_stream {
                        ChannelError::PeerGone
                    } else {
                        ChannelError::PeerClosed
                    })),
                    _ => None,
                },
            )?;
            let len = lane.chunk_len.load(Ordering::Relaxed) as usize;
            let last = lane.last_chunk.load(Ordering::Relaxed) != 0;
            if len > self.chunk_capacity {
                return Err(ChannelError::Decode(codec::CodecError::Malformed(
                    "chunk length exceeds chunk capacity",
                )));
            }
            self.raise(LaneDir::Inbound);
            let start = frame.len();
            frame.resize(start + len, 0);
            let lane = self.lane(LaneDir::Inbound);
            lane.region.read_into(0, &mut frame[start..]);
            let swapped = lane.status.compare_exchange(
                status::READY,
                status::EMPTY,
                Ordering::Release,
                Ordering::Acquire,
            );
            debug_assert!(swapped.is_ok(), "reader lost the Ready slot");
            self.lower(LaneDir::Inbound);
            if last {
                break;
            }
        }
        Ok(codec::decode(&frame)?)
    }

    fn close(&mut self) -> Result<(), ChannelError> {
        if !self.closed {
            self.closed = true;
            self.lane(LaneDir::Outbound).park_closed(true);
            self.lane(LaneDir::Inbound).park_closed(false);
        }
        Ok(())
    }
}

impl Drop for MpkEndpoint {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

/// Cloneable, thread-safe handle onto one lane's data buffer and register
/// slot; how tests and observers probe a pair they do not own.
#[derive(Clone)]
pub struct LaneProbe {
    shared: Arc<PairShared>,
    c2s: bool,
}

impl LaneProbe {
    fn lane(&self) -> &Lane {
        if self.c2s {
            &self.shared.c2s
        } else {
            &self.shared.s2c
        }
    }

    fn region(&self) -> &ProtectedRegion {
        &self.lane().region
    }

    /// Probe the data buffer with the calling thread's rights.
    pub fn probe(&self, offset: usize, mode: AccessMode) -> Result<ProbeOutcome, ProtectionError> {
        self.region().probe(offset, mode)
    }

    /// Adopt the register last published for this lane into the calling thread.
    pub fn adopt(&self) -> Result<AccessRegister, ProtectionError> {
        self.shared.domain.adopt_register(&self.lane().slot)
    }

    pub fn domain(&self) -> &ProtectionDomain {
        &self.shared.domain
    }
}
