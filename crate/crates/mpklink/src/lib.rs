//! Intra-host IPC with protection-key-guarded shared memory.
//!
//! The crate provides four interchangeable message transports behind one
//! [`transport::Channel`] interface:
//!
//! - paired named pipes ([`transport::fifo`])
//! - a single bidirectional Unix domain socket ([`transport::uds`])
//! - dual-region polled shared memory ([`transport::shm`])
//! - an in-process shared-memory channel whose buffers are tagged with
//!   memory protection keys ([`mpk`])
//!
//! All transports exchange [`codec::Envelope`] frames in one deterministic
//! byte layout, optionally signed by a service identity registered with an
//! in-process certificate-authority registry ([`identity`]).
//!
//! The [`protection`] module abstracts over hardware protection keys
//! (`pkey_alloc` / `pkey_mprotect` / PKRU) and ships a software-emulated
//! backend so the whole suite runs on machines without the hardware feature.
//!
//! [`wordcount`] is the distributed word-count workload used by the `bench`
//! CLI to compare the transports.

pub mod codec;
pub mod identity;
pub mod mpk;
pub mod protection;
pub mod transport;
pub mod wordcount;
