//! Hardware backend: the `pkey_*` syscalls plus the PKRU register.
//!
//! Support requires an x86-64 CPU with OS-enabled protection keys
//! (CPUID.7.0:ECX.OSPKE) and a kernel that accepts `pkey_alloc`; both are
//! probed once. Everything here is a no-op stub on other targets so the
//! crate builds everywhere and reports [`BackendUnavailable`] at runtime.
//!
//! [`BackendUnavailable`]: super::ProtectionError::BackendUnavailable

use super::{AccessMode, ProbeOutcome, ProtectionError};

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod imp {
    use super::*;
    use std::sync::OnceLock;

    pub fn is_supported() -> bool {
        static SUPPORTED: OnceLock<bool> = OnceLock::new();
        *SUPPORTED.get_or_init(|| {
            if !ospke_enabled() {
                return false;
            }
            // The CPU may expose the feature while the kernel refuses the
            // syscalls (old kernel, seccomp, gVisor); try a real allocation.
            match sys_pkey_alloc() {
                Ok(key) => {
                    sys_pkey_free(key);
                    true
                }
                Err(_) => false,
            }
        })
    }

    /// CPUID.(EAX=07H,ECX=0):ECX bit 4 — OS has enabled CR4.PKE, so the
    /// PKRU instructions will not fault.
    fn ospke_enabled() -> bool {
        let leaf = core::arch::x86_64::__cpuid_count(0x7, 0);
        leaf.ecx & (1 << 4) != 0
    }

    fn sys_pkey_alloc() -> Result<u32, i32> {
        let r = unsafe { libc::syscall(libc::SYS_pkey_alloc, 0usize, 0usize) };
        if r >= 0 {
            Ok(r as u32)
        } else {
            Err(unsafe { *libc::__errno_location() })
        }
    }

    fn sys_pkey_free(key: u32) {
        unsafe {
            libc::syscall(libc::SYS_pkey_free, key as usize);
        }
    }

    pub fn pkey_alloc() -> Result<u32, ProtectionError> {
        match sys_pkey_alloc() {
            Ok(key) => Ok(key),
            Err(libc::ENOSPC) => Err(ProtectionError::KeysExhausted),
            Err(_) => Err(ProtectionError::BackendUnavailable),
        }
    }

    pub fn pkey_free(key: u32) {
        sys_pkey_free(key);
    }

    pub fn pkey_mprotect(addr: *mut u8, len: usize, key: u32) -> Result<(), ProtectionError> {
        let r = unsafe {
            libc::syscall(
                libc::SYS_pkey_mprotect,
                addr as usize,
                len,
                (libc::PROT_READ | libc::PROT_WRITE) as usize,
                key as usize,
            )
        };
        if r == 0 {
            Ok(())
        } else {
            Err(ProtectionError::BadAlignment("pkey_mprotect rejected the region"))
        }
    }

    pub fn pkru_read() -> u32 {
        let pkru: u32;
        unsafe {
            // ECX must be zero for RDPKRU.
            core::arch::asm!(
                "rdpkru",
                in("ecx") 0u32,
                out("eax") pkru,
                out("edx") _,
                options(nomem, nostack, preserves_flags),
            );
        }
        pkru
    }

    pub fn pkru_write(pkru: u32) {
        unsafe {
            // ECX and EDX must be zero for WRPKRU.
            core::arch::asm!(
                "wrpkru",
                in("eax") pkru,
                in("ecx") 0u32,
                in("edx") 0u32,
                options(nomem, nostack, preserves_flags),
            );
        }
    }

    /// Really touch the byte, in a forked child that first re-applies this
    /// thread's PKRU. A protection fault kills only the child, which the
    /// parent reads back as an access violation.
    pub fn probe_access(base: *mut u8, offset: usize, mode: AccessMode) -> ProbeOutcome {
        let pkru = pkru_read();
        unsafe {
            match libc::fork() {
                -1 => panic!("probe fork failed: {}", std::io::Error::last_os_error()),
                0 => {
                    // Child: only async-signal-safe work before _exit.
                    pkru_write(pkru);
                    let p = base.add(offset);
                    let v = std::ptr::read_volatile(p);
                    if mode == AccessMode::Write {
                        std::ptr::write_volatile(p, v);
                    }
                    libc::_exit(0);
                }
                pid => {
                    let mut status = 0;
                    loop {
                        let r = libc::waitpid(pid, &mut status, 0);
                        if r == pid {
                            break;
                        }
                        if r == -1 && *libc::__errno_location() != libc::EINTR {
                            panic!("probe waitpid failed: {}", std::io::Error::last_os_error());
                        }
                    }
                    if libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0 {
                        ProbeOutcome::Allowed
                    } else if libc::WIFSIGNALED(status)
                        && matches!(libc::WTERMSIG(status), libc::SIGSEGV | libc::SIGBUS)
                    {
                        ProbeOutcome::AccessViolation
                    } else {
                        panic!("unexpected probe child status: {status:#x}");
                    }
                }
            }
        }
    }
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
mod imp {
    use super::*;

    pub fn is_supported() -> bool {
        false
    }

    pub fn pkey_alloc() -> Result<u32, ProtectionError> {
        Err(ProtectionError::BackendUnavailable)
    }

    pub fn pkey_free(_key: u32) {}

    pub fn pkey_mprotect(_addr: *mut u8, _len: usize, _key: u32) -> Result<(), ProtectionError> {
        Err(ProtectionError::BackendUnavailable)
    }

    pub fn pkru_read() -> u32 {
        0
    }

    pub fn pkru_write(_pkru: u32) {}

    pub fn probe_access(_base: *mut u8, _offset: usize, _mode: AccessMode) -> ProbeOutcome {
        ProbeOutcome::AccessViolation
    }
}

pub(super) use imp::*;
