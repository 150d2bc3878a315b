//! Memory protection keys: allocate keys, tag page-aligned regions, and
//! flip per-thread access rights without remapping.
//!
//! Two backends implement the same contract:
//!
//! - `Hardware` drives the x86 feature directly: `pkey_alloc` /
//!   `pkey_mprotect` syscalls tag pages, and the thread-local PKRU register
//!   holds two bits per key (access-disable at bit `2k`, write-disable at
//!   bit `2k+1`). Rights changes are a register write, not a syscall.
//! - `Emulated` keeps the same rights table in thread-local state and
//!   enforces it in the guarded accessors of [`ProtectedRegion`], so every
//!   test runs on machines without protection-key support.
//!
//! Rights are strictly thread-local on both backends. A thread that never
//! allocated a key nor received rights for it (via [`KeyHandle::set_rights`]
//! or [`ProtectionDomain::adopt_register`]) has no access to memory tagged
//! with that key; keys that are not allocated protect nothing and read as
//! [`AccessRights::ReadWrite`]. Threads coordinate by publishing a register
//! snapshot into a [`RegisterSlot`] that the peer adopts.

mod emulated;
mod hardware;

use std::fmt;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

/// Number of protection keys per domain, including the default key 0.
pub const KEY_COUNT: usize = 16;

/// Stored in a [`RegisterSlot`] before the first publish. Every 2-bit field
/// is `01`, a pattern the canonical encoding never produces.
pub const SLOT_UNINITIALIZED: u32 = 0x5555_5555;

/// Errors for key allocation, tagging, and rights management.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtectionError {
    /// All 15 allocatable keys of the domain are live.
    #[error("protection keys exhausted")]
    KeysExhausted,
    /// Hardware backend requested but the CPU or kernel lacks support.
    #[error("protection-key hardware unavailable")]
    BackendUnavailable,
    /// Region is not page-aligned or its length is not a positive page multiple.
    #[error("bad alignment: {0}")]
    BadAlignment(&'static str),
    /// The key was freed.
    #[error("protection key is dead")]
    DeadKey,
    /// The register slot was never published to.
    #[error("register slot is uninitialized")]
    UninitializedSlot,
    /// Probe offset beyond the region length.
    #[error("offset {offset} out of range for region of {len} bytes")]
    OffsetOutOfRange { offset: usize, len: usize },
}

/// Per-thread access rights for one key, ordered by permissiveness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessRights {
    NoAccess,
    ReadOnly,
    ReadWrite,
}

impl AccessRights {
    /// Whether these rights permit the given access mode.
    pub fn permits(self, mode: AccessMode) -> bool {
        match mode {
            AccessMode::Read => self != AccessRights::NoAccess,
            AccessMode::Write => self == AccessRights::ReadWrite,
        }
    }

    fn field_bits(self) -> u32 {
        match self {
            AccessRights::ReadWrite => 0b00,
            AccessRights::ReadOnly => 0b10,
            AccessRights::NoAccess => 0b11,
        }
    }

    fn from_field_bits(bits: u32) -> Self {
        if bits & 0b01 != 0 {
            AccessRights::NoAccess
        } else if bits & 0b10 != 0 {
            AccessRights::ReadOnly
        } else {
            AccessRights::ReadWrite
        }
    }
}

impl fmt::Display for AccessRights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AccessRights::ReadWrite => "read-write",
            AccessRights::ReadOnly => "read-only",
            AccessRights::NoAccess => "no-access",
        };
        f.write_str(s)
    }
}

/// The access a probe or accessor attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessMode {
    Read,
    Write,
}

/// Result of probing a protected region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeOutcome {
    Allowed,
    AccessViolation,
}

/// A thread's rights for all 16 keys.
///
/// The canonical 32-bit encoding mirrors the PKRU layout: key `k` occupies
/// bit `2k` (access-disable) and bit `2k+1` (write-disable), so ReadWrite is
/// `00`, ReadOnly `10`, and NoAccess `11`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRegister {
    rights: [AccessRights; KEY_COUNT],
}

impl AccessRegister {
    /// Register granting ReadWrite on every key.
    pub fn all_read_write() -> Self {
        AccessRegister { rights: [AccessRights::ReadWrite; KEY_COUNT] }
    }

    pub fn rights(&self, key_id: u8) -> AccessRights {
        self.rights[key_id as usize]
    }

    pub fn set(&mut self, key_id: u8, rights: AccessRights) {
        self.rights[key_id as usize] = rights;
    }

    /// Canonical 32-bit encoding.
    pub fn encode(&self) -> u32 {
        self.rights
            .iter()
            .enumerate()
            .fold(0, |acc, (k, r)| acc | (r.field_bits() << (2 * k)))
    }

    /// Total inverse of [`encode`](Self::encode); any field with the
    /// access-disable bit set decodes to NoAccess.
    pub fn decode(bits: u32) -> Self {
        let mut rights = [AccessRights::ReadWrite; KEY_COUNT];
        for (k, slot) in rights.iter_mut().enumerate() {
            *slot = AccessRights::from_field_bits((bits >> (2 * k)) & 0b11);
        }
        AccessRegister { rights }
    }
}

impl Default for AccessRegister {
    fn default() -> Self {
        Self::all_read_write()
    }
}

/// Which implementation backs a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Hardware,
    Emulated,
}

/// Backend selection, from the `protection.backend` configuration value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendChoice {
    /// Probe for hardware support and fall back to the emulation.
    #[default]
    Auto,
    Hardware,
    Emulated,
}

impl std::str::FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(BackendChoice::Auto),
            "hardware" => Ok(BackendChoice::Hardware),
            "emulated" => Ok(BackendChoice::Emulated),
            other => Err(format!("unknown backend '{other}' (expected auto|hardware|emulated)")),
        }
    }
}

/// True when the CPU and kernel expose usable protection keys.
pub fn hardware_supported() -> bool {
    hardware::is_supported()
}

static NEXT_DOMAIN_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct KeySlot {
    generation: u64,
}

#[derive(Debug)]
struct DomainSlots {
    /// Index = key id; `Some` while the key is live.
    live: [Option<KeySlot>; KEY_COUNT],
    next_generation: u64,
}

#[derive(Debug)]
pub(crate) struct DomainInner {
    id: u64,
    backend: BackendKind,
    slots: Mutex<DomainSlots>,
}

impl DomainInner {
    fn generation_of(&self, key_id: u8) -> Option<u64> {
        self.slots.lock().unwrap().live[key_id as usize]
            .as_ref()
            .map(|s| s.generation)
    }

    fn is_live(&self, key_id: u8, generation: u64) -> bool {
        self.generation_of(key_id) == Some(generation)
    }
}

/// An allocation scope for protection keys. Hardware domains share the
/// kernel's process-wide key space; emulated domains are independent.
#[derive(Clone, Debug)]
pub struct ProtectionDomain {
    inner: Arc<DomainInner>,
}

impl ProtectionDomain {
    pub fn new(choice: BackendChoice) -> Result<Self, ProtectionError> {
        let backend = match choice {
            BackendChoice::Emulated => BackendKind::Emulated,
            BackendChoice::Hardware => {
                if hardware::is_supported() {
                    BackendKind::Hardware
                } else {
                    return Err(ProtectionError::BackendUnavailable);
                }
            }
            BackendChoice::Auto => {
                if hardware::is_supported() {
                    BackendKind::Hardware
                } else {
                    BackendKind::Emulated
                }
            }
        };
        Ok(ProtectionDomain {
            inner: Arc::new(DomainInner {
                id: NEXT_DOMAIN_ID.fetch_add(1, Ordering::Relaxed),
                backend,
                slots: Mutex::new(DomainSlots {
                    live: Default::default(),
                    next_generation: 1,
                }),
            }),
        })
    }

    pub fn backend(&self) -> BackendKind {
        self.inner.backend
    }

    /// Allocate a fresh key. The calling thread starts with ReadWrite rights
    /// for it; every other thread starts with NoAccess.
    pub fn allocate_key(&self) -> Result<KeyHandle, ProtectionError> {
        let mut slots = self.inner.slots.lock().unwrap();
        let key_id = match self.inner.backend {
            BackendKind::Hardware => {
                let id = hardware::pkey_alloc()?;
                debug_assert!((1..KEY_COUNT as u32).contains(&id));
                if slots.live[id as usize].is_some() {
                    // Another domain in this process freed the id behind our
                    // back; treat the stale slot as dead.
                    slots.live[id as usize] = None;
                }
                id as u8
            }
            BackendKind::Emulated => {
                let free = (1..KEY_COUNT).find(|&k| slots.live[k].is_none());
                match free {
                    Some(k) => k as u8,
                    None => return Err(ProtectionError::KeysExhausted),
                }
            }
        };
        let generation = slots.next_generation;
        slots.next_generation += 1;
        slots.live[key_id as usize] = Some(KeySlot { generation });
        drop(slots);

        if self.inner.backend == BackendKind::Emulated {
            emulated::set_thread_rights(self.inner.id, key_id, generation, AccessRights::ReadWrite);
        }
        // pkey_alloc already granted the calling thread full access.
        Ok(KeyHandle {
            inner: Arc::new(KeyInner {
                domain: Arc::clone(&self.inner),
                key_id,
                generation,
            }),
        })
    }

    /// Release a key. Later operations through any handle to it fail with
    /// [`ProtectionError::DeadKey`]. Dropping the last handle frees implicitly.
    pub fn free_key(&self, key: &KeyHandle) -> Result<(), ProtectionError> {
        free_key_inner(&key.inner)
    }

    /// Snapshot of the calling thread's rights. Keys that are not currently
    /// allocated protect nothing and read as ReadWrite.
    pub fn read_register(&self) -> AccessRegister {
        let slots = self.inner.slots.lock().unwrap();
        let mut reg = AccessRegister::all_read_write();
        match self.inner.backend {
            BackendKind::Hardware => {
                let pkru = AccessRegister::decode(hardware::pkru_read());
                for k in 1..KEY_COUNT {
                    if slots.live[k].is_some() {
                        reg.set(k as u8, pkru.rights(k as u8));
                    }
                }
            }
            BackendKind::Emulated => {
                for k in 1..KEY_COUNT {
                    if let Some(slot) = &slots.live[k] {
                        reg.set(
                            k as u8,
                            emulated::thread_rights(self.inner.id, k as u8, slot.generation),
                        );
                    }
                }
            }
        }
        reg
    }

    /// Load a published register from `slot` and apply it to the calling
    /// thread. Only fields of currently allocated keys are applied.
    pub fn adopt_register(&self, slot: &RegisterSlot) -> Result<AccessRegister, ProtectionError> {
        let bits = slot.cell.load(Ordering::Acquire);
        if bits == SLOT_UNINITIALIZED {
            return Err(ProtectionError::UninitializedSlot);
        }
        let adopted = AccessRegister::decode(bits);
        let slots = self.inner.slots.lock().unwrap();
        match self.inner.backend {
            BackendKind::Hardware => {
                let mut pkru = hardware::pkru_read();
                for k in 1..KEY_COUNT {
                    if slots.live[k].is_some() {
                        let shift = 2 * k as u32;
                        pkru &= !(0b11 << shift);
                        pkru |= adopted.rights(k as u8).field_bits() << shift;
                    }
                }
                hardware::pkru_write(pkru);
            }
            BackendKind::Emulated => {
                for k in 1..KEY_COUNT {
                    if let Some(s) = &slots.live[k] {
                        emulated::set_thread_rights(
                            self.inner.id,
                            k as u8,
                            s.generation,
                            adopted.rights(k as u8),
                        );
                    }
                }
            }
        }
        drop(slots);
        Ok(self.read_register())
    }
}

fn free_key_inner(key: &KeyInner) -> Result<(), ProtectionError> {
    let mut slots = key.domain.slots.lock().unwrap();
    match &slots.live[key.key_id as usize] {
        Some(slot) if slot.generation == key.generation => {
            slots.live[key.key_id as usize] = None;
            drop(slots);
            if key.domain.backend == BackendKind::Hardware {
                hardware::pkey_free(key.key_id as u32);
            }
            Ok(())
        }
        _ => Err(ProtectionError::DeadKey),
    }
}

struct KeyInner {
    domain: Arc<DomainInner>,
    key_id: u8,
    generation: u64,
}

impl Drop for KeyInner {
    fn drop(&mut self) {
        let _ = free_key_inner(self);
    }
}

/// Handle to a live protection key. Clones share the key; the key is freed
/// explicitly via [`ProtectionDomain::free_key`] or when the last clone drops.
#[derive(Clone)]
pub struct KeyHandle {
    inner: Arc<KeyInner>,
}

impl KeyHandle {
    pub fn key_id(&self) -> u8 {
        self.inner.key_id
    }

    pub fn backend(&self) -> BackendKind {
        self.inner.domain.backend
    }

    pub fn is_live(&self) -> bool {
        self.inner.domain.is_live(self.inner.key_id, self.inner.generation)
    }

    /// Change the calling thread's rights for this key. Other threads are
    /// unaffected. Returns the thread's new register.
    pub fn set_rights(&self, rights: AccessRights) -> Result<AccessRegister, ProtectionError> {
        if !self.is_live() {
            return Err(ProtectionError::DeadKey);
        }
        match self.inner.domain.backend {
            BackendKind::Hardware => {
                let shift = 2 * self.inner.key_id as u32;
                let mut pkru = hardware::pkru_read();
                pkru &= !(0b11 << shift);
                pkru |= rights.field_bits() << shift;
                hardware::pkru_write(pkru);
            }
            BackendKind::Emulated => {
                emulated::set_thread_rights(
                    self.inner.domain.id,
                    self.inner.key_id,
                    self.inner.generation,
                    rights,
                );
            }
        }
        Ok(self.domain().read_register())
    }

    /// The calling thread's current rights for this key.
    pub fn thread_rights(&self) -> Result<AccessRights, ProtectionError> {
        if !self.is_live() {
            return Err(ProtectionError::DeadKey);
        }
        Ok(self.domain().read_register().rights(self.inner.key_id))
    }

    fn domain(&self) -> ProtectionDomain {
        ProtectionDomain { inner: Arc::clone(&self.inner.domain) }
    }
}

impl fmt::Debug for KeyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyHandle")
            .field("key_id", &self.inner.key_id)
            .field("backend", &self.inner.domain.backend)
            .field("live", &self.is_live())
            .finish()
    }
}

/// Shared 32-bit cell through which threads exchange register snapshots.
pub struct RegisterSlot {
    cell: AtomicU32,
}

impl RegisterSlot {
    pub fn new() -> Self {
        RegisterSlot { cell: AtomicU32::new(SLOT_UNINITIALIZED) }
    }

    /// Store the canonical encoding with release ordering.
    pub fn publish(&self, reg: &AccessRegister) {
        self.cell.store(reg.encode(), Ordering::Release);
    }

    pub fn is_initialized(&self) -> bool {
        self.cell.load(Ordering::Acquire) != SLOT_UNINITIALIZED
    }
}

impl Default for RegisterSlot {
    fn default() -> Self {
        Self::new()
    }
}

/// The system page size; regions and lane buffers are sized in multiples of it.
pub fn page_size() -> usize {
    static PAGE: OnceLock<usize> = OnceLock::new();
    *PAGE.get_or_init(|| unsafe { libc::sysconf(libc::_SC_PAGESIZE) as usize })
}

/// Page-aligned anonymous memory, the unit [`tag_region`] operates on.
#[derive(Debug)]
pub struct PageBuffer {
    ptr: NonNull<u8>,
    len: usize,
}

// Access discipline comes from the channel protocol (atomic status words)
// and the protection rights themselves.
unsafe impl Send for PageBuffer {}
unsafe impl Sync for PageBuffer {}

impl PageBuffer {
    /// Map `len` zeroed bytes; `len` must be a positive multiple of the page size.
    pub fn new(len: usize) -> Result<Self, ProtectionError> {
        if len == 0 || len % page_size() != 0 {
            return Err(ProtectionError::BadAlignment(
                "length must be a positive multiple of the page size",
            ));
        }
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            panic!("mmap failed: {}", std::io::Error::last_os_error());
        }
        Ok(PageBuffer { ptr: NonNull::new(ptr as *mut u8).unwrap(), len })
    }

    /// Round `len` up to a whole number of pages and map that.
    pub fn with_at_least(len: usize) -> Result<Self, ProtectionError> {
        let page = page_size();
        let rounded = len.max(1).div_ceil(page) * page;
        Self::new(rounded)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn as_ptr(&self) -> *mut u8 {
        self.ptr.as_ptr()
    }
}

impl Drop for PageBuffer {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.as_ptr().cast(), self.len);
        }
    }
}

/// Tag every page of `buffer` with `key`. From then on access is governed by
/// each thread's rights for that key.
pub fn tag_region(buffer: PageBuffer, key: &KeyHandle) -> Result<ProtectedRegion, ProtectionError> {
    if !key.is_live() {
        return Err(ProtectionError::DeadKey);
    }
    if key.backend() == BackendKind::Hardware {
        hardware::pkey_mprotect(buffer.as_ptr(), buffer.len(), key.key_id() as u32)?;
    }
    Ok(ProtectedRegion { buffer, key: key.clone() })
}

/// A page-aligned region whose pages carry exactly one protection key for
/// its whole lifetime.
#[derive(Debug)]
pub struct ProtectedRegion {
    buffer: PageBuffer,
    key: KeyHandle,
}

impl ProtectedRegion {
    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn key(&self) -> &KeyHandle {
        &self.key
    }

    /// Attempt one access at `offset` and report whether the calling
    /// thread's rights permit it.
    ///
    /// On the hardware backend the access really happens, in a forked child
    /// carrying this thread's PKRU value, so a protection fault is trapped
    /// and reported instead of crashing the caller. On the emulated backend
    /// the outcome is computed from the thread's rights table.
    pub fn probe(&self, offset: usize, mode: AccessMode) -> Result<ProbeOutcome, ProtectionError> {
        if offset >= self.len() {
            return Err(ProtectionError::OffsetOutOfRange { offset, len: self.len() });
        }
        if !self.key.is_live() {
            return Err(ProtectionError::DeadKey);
        }
        match self.key.backend() {
            BackendKind::Hardware => {
                Ok(hardware::probe_access(self.buffer.as_ptr(), offset, mode))
            }
            BackendKind::Emulated => {
                let rights = self.key.thread_rights()?;
                Ok(if rights.permits(mode) {
                    ProbeOutcome::Allowed
                } else {
                    ProbeOutcome::AccessViolation
                })
            }
        }
    }

    /// Copy bytes out of the region. The caller must hold read rights;
    /// ordinary channel code raises rights first, so a violation here is a
    /// contract bug and panics (the hardware backend would fault).
    pub fn read_into(&self, offset: usize, dst: &mut [u8]) {
        assert!(offset + dst.len() <= self.len(), "read past end of region");
        self.check_emulated(AccessMode::Read);
        unsafe {
            std::ptr::copy_nonoverlapping(self.buffer.as_ptr().add(offset), dst.as_mut_ptr(), dst.len());
        }
    }

    /// Copy bytes into the region. Same contract as [`read_into`](Self::read_into).
    pub fn write_at(&self, offset: usize, src: &[u8]) {
        assert!(offset + src.len() <= self.len(), "write past end of region");
        self.check_emulated(AccessMode::Write);
        unsafe {
            std::ptr::copy_nonoverlapping(src.as_ptr(), self.buffer.as_ptr().add(offset), src.len());
        }
    }

    fn check_emulated(&self, mode: AccessMode) {
        if self.key.backend() == BackendKind::Emulated {
            let rights = self
                .key
                .thread_rights()
                .expect("region accessed through a dead key");
            assert!(
                rights.permits(mode),
                "protection violation: {:?} access to key {} with {} rights",
                mode,
                self.key.key_id(),
                rights,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Barrier;

    fn emulated_domain() -> ProtectionDomain {
        ProtectionDomain::new(BackendChoice::Emulated).unwrap()
    }

    #[test]
    fn rights_are_totally_ordered_by_permissiveness() {
        assert!(AccessRights::ReadWrite > AccessRights::ReadOnly);
        assert!(AccessRights::ReadOnly > AccessRights::NoAccess);
    }

    #[test]
    fn register_encodings_match_bit_layout() {
        let mut reg = AccessRegister::all_read_write();
        assert_eq!(reg.encode(), 0x0000_0000);
        reg.set(1, AccessRights::NoAccess);
        assert_eq!(reg.encode(), 0x0000_000C);
        reg.set(1, AccessRights::ReadWrite);
        reg.set(2, AccessRights::ReadOnly);
        assert_eq!(reg.encode(), 0x0000_0020);
    }

    #[test]
    fn register_encoding_round_trips() {
        // all single-key cases
        for k in 0..KEY_COUNT as u8 {
            for r in [AccessRights::ReadWrite, AccessRights::ReadOnly, AccessRights::NoAccess] {
                let mut reg = AccessRegister::all_read_write();
                reg.set(k, r);
                assert_eq!(AccessRegister::decode(reg.encode()), reg);
            }
        }
        // random sample of the 3^16 assignments
        let mut state = 0x243F_6A88_85A3_08D3u64;
        for _ in 0..2000 {
            let mut reg = AccessRegister::all_read_write();
            for k in 0..KEY_COUNT as u8 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let r = match (state >> 33) % 3 {
                    0 => AccessRights::ReadWrite,
                    1 => AccessRights::ReadOnly,
                    _ => AccessRights::NoAccess,
                };
                reg.set(k, r);
            }
            assert_eq!(AccessRegister::decode(reg.encode()), reg);
        }
    }

    #[test]
    fn sentinel_is_never_a_canonical_encoding() {
        let decoded = AccessRegister::decode(SLOT_UNINITIALIZED);
        assert_ne!(decoded.encode(), SLOT_UNINITIALIZED);
    }

    #[test]
    fn fifteen_keys_then_exhausted() {
        let domain = emulated_domain();
        let keys: Vec<_> = (0..15).map(|_| domain.allocate_key().unwrap()).collect();
        let mut ids: Vec<_> = keys.iter().map(|k| k.key_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 15);
        assert!(ids.iter().all(|&id| (1..=15).contains(&id)));
        assert_eq!(domain.allocate_key().unwrap_err(), ProtectionError::KeysExhausted);
    }

    #[test]
    fn allocate_free_allocate_reuses_ids() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let id = key.key_id();
        domain.free_key(&key).unwrap();
        assert!(!key.is_live());
        let again = domain.allocate_key().unwrap();
        assert_eq!(again.key_id(), id);
    }

    #[test]
    fn hardware_unavailable_reported() {
        if !hardware_supported() {
            assert_eq!(
                ProtectionDomain::new(BackendChoice::Hardware).unwrap_err(),
                ProtectionError::BackendUnavailable
            );
        } else {
            assert!(ProtectionDomain::new(BackendChoice::Hardware).is_ok());
        }
    }

    #[test]
    fn auto_always_yields_a_domain() {
        let domain = ProtectionDomain::new(BackendChoice::Auto).unwrap();
        if !hardware_supported() {
            assert_eq!(domain.backend(), BackendKind::Emulated);
        }
    }

    #[test]
    fn fresh_thread_with_no_allocations_sees_all_read_write() {
        let domain = emulated_domain();
        let d = domain.clone();
        std::thread::spawn(move || {
            assert_eq!(d.read_register(), AccessRegister::all_read_write());
        })
        .join()
        .unwrap();
    }

    #[test]
    fn set_rights_reflected_in_register() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        assert_eq!(key.thread_rights().unwrap(), AccessRights::ReadWrite);
        let reg = key.set_rights(AccessRights::ReadOnly).unwrap();
        assert_eq!(reg.rights(key.key_id()), AccessRights::ReadOnly);
        assert_eq!(domain.read_register(), reg);
    }

    #[test]
    fn operations_on_freed_key_fail() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        domain.free_key(&key).unwrap();
        assert_eq!(key.set_rights(AccessRights::NoAccess).unwrap_err(), ProtectionError::DeadKey);
        assert_eq!(domain.free_key(&key).unwrap_err(), ProtectionError::DeadKey);
        let buf = PageBuffer::with_at_least(1).unwrap();
        assert_eq!(tag_region(buf, &key).unwrap_err(), ProtectionError::DeadKey);
    }

    #[test]
    fn zero_length_buffer_is_bad_alignment() {
        assert!(matches!(PageBuffer::new(0), Err(ProtectionError::BadAlignment(_))));
        assert!(matches!(PageBuffer::new(100), Err(ProtectionError::BadAlignment(_))));
    }

    #[test]
    fn thread_locality_under_barrier() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let barrier = Arc::new(Barrier::new(2));

        let spawn_side = |rights: AccessRights| {
            let key = key.clone();
            let domain = domain.clone();
            let barrier = Arc::clone(&barrier);
            std::thread::spawn(move || {
                for _ in 0..1000 {
                    barrier.wait();
                    key.set_rights(rights).unwrap();
                    barrier.wait();
                    assert_eq!(domain.read_register().rights(key.key_id()), rights);
                }
            })
        };

        let t1 = spawn_side(AccessRights::NoAccess);
        let t2 = spawn_side(AccessRights::ReadOnly);
        t1.join().unwrap();
        t2.join().unwrap();
    }

    #[test]
    fn publish_adopt_round_trip_across_threads() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let slot = Arc::new(RegisterSlot::new());
        let barrier = Arc::new(Barrier::new(2));

        let publisher = {
            let (key, domain, slot, barrier) =
                (key.clone(), domain.clone(), Arc::clone(&slot), Arc::clone(&barrier));
            std::thread::spawn(move || {
                for i in 0..1000u32 {
                    let rights = if i % 2 == 0 { AccessRights::NoAccess } else { AccessRights::ReadOnly };
                    key.set_rights(rights).unwrap();
                    slot.publish(&domain.read_register());
                    barrier.wait(); // published
                    barrier.wait(); // adopted
                }
            })
        };
        let adopter = {
            let (key, domain, slot, barrier) =
                (key.clone(), domain.clone(), Arc::clone(&slot), Arc::clone(&barrier));
            std::thread::spawn(move || {
                for i in 0..1000u32 {
                    barrier.wait();
                    let expected = if i % 2 == 0 { AccessRights::NoAccess } else { AccessRights::ReadOnly };
                    let adopted = domain.adopt_register(&slot).unwrap();
                    assert_eq!(adopted.rights(key.key_id()), expected);
                    assert_eq!(domain.read_register().rights(key.key_id()), expected);
                    barrier.wait();
                }
            })
        };
        publisher.join().unwrap();
        adopter.join().unwrap();
    }

    #[test]
    fn adopt_from_untouched_slot_fails() {
        let domain = emulated_domain();
        let slot = RegisterSlot::new();
        assert_eq!(
            domain.adopt_register(&slot).unwrap_err(),
            ProtectionError::UninitializedSlot
        );
    }

    #[test]
    fn publish_then_adopt_on_same_thread_is_idempotent() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        key.set_rights(AccessRights::ReadOnly).unwrap();
        let before = domain.read_register();
        let slot = RegisterSlot::new();
        slot.publish(&before);
        let adopted = domain.adopt_register(&slot).unwrap();
        assert_eq!(adopted, before);
        assert_eq!(domain.read_register(), before);
    }

    #[test]
    fn probe_matrix_matches_prediction_emulated() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let region = tag_region(PageBuffer::with_at_least(1).unwrap(), &key).unwrap();
        let cases = [
            (AccessRights::ReadWrite, AccessMode::Read, ProbeOutcome::Allowed),
            (AccessRights::ReadWrite, AccessMode::Write, ProbeOutcome::Allowed),
            (AccessRights::ReadOnly, AccessMode::Read, ProbeOutcome::Allowed),
            (AccessRights::ReadOnly, AccessMode::Write, ProbeOutcome::AccessViolation),
            (AccessRights::NoAccess, AccessMode::Read, ProbeOutcome::AccessViolation),
            (AccessRights::NoAccess, AccessMode::Write, ProbeOutcome::AccessViolation),
        ];
        for (rights, mode, expected) in cases {
            key.set_rights(rights).unwrap();
            assert_eq!(region.probe(0, mode).unwrap(), expected, "{rights:?} {mode:?}");
        }
    }

    #[test]
    fn probe_offset_out_of_range() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let region = tag_region(PageBuffer::with_at_least(1).unwrap(), &key).unwrap();
        let len = region.len();
        assert_eq!(
            region.probe(len, AccessMode::Read).unwrap_err(),
            ProtectionError::OffsetOutOfRange { offset: len, len }
        );
    }

    #[test]
    fn guarded_accessors_round_trip_with_rights() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let region = tag_region(PageBuffer::with_at_least(64).unwrap(), &key).unwrap();
        region.write_at(8, b"guarded");
        let mut out = [0u8; 7];
        region.read_into(8, &mut out);
        assert_eq!(&out, b"guarded");
    }

    #[test]
    #[should_panic(expected = "protection violation")]
    fn guarded_write_without_rights_panics() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let region = tag_region(PageBuffer::with_at_least(1).unwrap(), &key).unwrap();
        key.set_rights(AccessRights::ReadOnly).unwrap();
        region.write_at(0, &[1]);
    }

    #[test]
    fn other_threads_have_no_access_to_allocated_keys() {
        let domain = emulated_domain();
        let key = domain.allocate_key().unwrap();
        let region = Arc::new(tag_region(PageBuffer::with_at_least(1).unwrap(), &key).unwrap());
        let r = Arc::clone(&region);
        std::thread::spawn(move || {
            assert_eq!(r.probe(0, AccessMode::Read).unwrap(), ProbeOutcome::AccessViolation);
            assert_eq!(r.probe(0, AccessMode::Write).unwrap(), ProbeOutcome::AccessViolation);
        })
        .join()
        .unwrap();
        // the allocating thread still has its rights
        assert_eq!(region.probe(0, AccessMode::Read).unwrap(), ProbeOutcome::Allowed);
    }
}
