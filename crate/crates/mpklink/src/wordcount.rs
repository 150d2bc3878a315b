//! The distributed word-count workload: a client reads a document and asks
//! the server for its word count over any [`Channel`].
//!
//! A word is a maximal run of non-whitespace characters, with Unicode
//! whitespace as the delimiter; no punctuation handling. The corpus
//! generator produces deterministic whitespace-separated ASCII words, so
//! the requested count of a generated file is known in advance and serves
//! as the oracle for transport tests.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{Envelope, Payload, SenderId};
use crate::identity::{CaRegistry, InvalidReason, ServiceIdentity, Verdict};
use crate::transport::{Channel, ChannelError};

#[derive(Debug, Error)]
pub enum WordcountError {
    #[error("document is not valid UTF-8")]
    InvalidUtf8,
    #[error("file unreadable: {0}")]
    FileUnreadable(String),
    #[error("transport: {0}")]
    Transport(#[from] ChannelError),
    #[error("identity: {0}")]
    Identity(#[from] crate::identity::IdentityError),
    #[error("peer replied with something other than a count")]
    UnexpectedResponse,
    #[error("i/o: {0}")]
    Io(String),
}

/// A UTF-8 text document; may be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    text: String,
}

impl Document {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, WordcountError> {
        let text = String::from_utf8(bytes).map_err(|_| WordcountError::InvalidUtf8)?;
        Ok(Document { text })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn count_words(&self) -> u64 {
        count_words(&self.text)
    }
}

/// Number of maximal non-whitespace runs in `text`.
pub fn count_words(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// UTF-8-validating variant for payload bytes off the wire.
pub fn count_words_bytes(bytes: &[u8]) -> Result<u64, WordcountError> {
    let text = std::str::from_utf8(bytes).map_err(|_| WordcountError::InvalidUtf8)?;
    Ok(count_words(text))
}

/// Why the server refused to answer a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditReason {
    /// Signature verification failed in signed mode.
    Signature(InvalidReason),
    /// The request could not be decoded or was not a count request.
    MalformedRequest,
}

/// One dropped request, kept for the operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub sender_id: SenderId,
    pub sequence: u64,
    pub reason: AuditReason,
}

/// Counters the server updates while it runs; shared with the harness.
#[derive(Default)]
pub struct ServerAudit {
    served: AtomicU64,
    records: Mutex<Vec<AuditRecord>>,
}

impl ServerAudit {
    pub fn new() -> Self {
        Self::default()
    }

    /// Requests answered with a count.
    pub fn served(&self) -> u64 {
        self.served.load(Ordering::Relaxed)
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn rejected(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    fn note(&self, record: AuditRecord) {
        self.records.lock().unwrap().push(record);
    }
}

/// Serve count requests until the peer closes the channel.
///
/// In signed mode every request is verified against the registry first; a
/// request that fails verification is dropped without a reply and leaves an
/// audit record — tampered traffic is never processed.
pub fn run_server(
    ch: &mut dyn Channel,
    registry: &CaRegistry,
    signed: bool,
    audit: &ServerAudit,
) -> Result<(), WordcountError> {
    let mut reply_seq = 0u64;
    loop {
        let request = match ch.recv() {
            Ok(envelope) => envelope,
            Err(ChannelError::PeerClosed) | Err(ChannelError::PeerGone) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        if signed {
            if let Verdict::Invalid(reason) = registry.verify_envelope(&request) {
                audit.note(AuditRecord {
                    sender_id: request.sender_id,
                    sequence: request.sequence,
                    reason: AuditReason::Signature(reason),
                });
                continue;
            }
        }
        let count = match request.typed_payload() {
            Ok(Payload::CountRequest { text }) => match count_words_bytes(&text) {
                Ok(count) => count,
                Err(_) => {
                    audit.note(AuditRecord {
                        sender_id: request.sender_id,
                        sequence: request.sequence,
                        reason: AuditReason::MalformedRequest,
                    });
                    continue;
                }
            },
            _ => {
                audit.note(AuditRecord {
                    sender_id: request.sender_id,
                    sequence: request.sequence,
                    reason: AuditReason::MalformedRequest,
                });
                continue;
            }
        };
        let reply = Envelope::with_payload([0u8; 16], reply_seq, &Payload::CountResponse { count });
        reply_seq += 1;
        match ch.send(&reply) {
            Ok(()) => {
                audit.served.fetch_add(1, Ordering::Relaxed);
            }
            Err(ChannelError::PeerClosed) | Err(ChannelError::PeerGone) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Send one count request for `text` and wait for the reply. The returned
/// duration spans request construction (and signing, in signed mode),
/// transmission, the server's computation, and receipt of the response.
pub fn request_count(
    ch: &mut dyn Channel,
    identity: &ServiceIdentity,
    text: &str,
    signed: bool,
    sequence: u64,
) -> Result<(u64, Duration), WordcountError> {
    let started = Instant::now();
    let payload = Payload::CountRequest { text: text.as_bytes().to_vec() };
    let mut envelope = Envelope::with_payload(identity.service_id(), sequence, &payload);
    if signed {
        envelope = identity.sign_envelope(envelope)?;
    }
    ch.send(&envelope)?;
    let reply = ch.recv()?;
    let elapsed = started.elapsed();
    match reply.typed_payload() {
        Ok(Payload::CountResponse { count }) => Ok((count, elapsed)),
        _ => Err(WordcountError::UnexpectedResponse),
    }
}

/// Read `path`, request its word count once, and return the count.
pub fn run_client(
    ch: &mut dyn Channel,
    identity: &ServiceIdentity,
    path: &Path,
    signed: bool,
) -> Result<u64, WordcountError> {
    let bytes =
        std::fs::read(path).map_err(|e| WordcountError::FileUnreadable(format!("{}: {e}", path.display())))?;
    let document = Document::from_bytes(bytes)?;
    let (count, _) = request_count(ch, identity, document.as_str(), signed, 0)?;
    Ok(count)
}

/// Words per line in generated corpora.
const WORDS_PER_LINE: u64 = 20;

/// Write exactly `n_words` pseudorandom ASCII words (lengths 1–12,
/// lowercase), single-space separated with a newline every 20 words.
/// Deterministic in `seed`: the same (n, seed) yields a byte-identical file.
pub fn generate_corpus(n_words: u64, seed: u64, path: &Path) -> Result<(), WordcountError> {
    let file = std::fs::File::create(path).map_err(|e| WordcountError::Io(e.to_string()))?;
    let mut out = std::io::BufWriter::new(file);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut word = [0u8; 12];
    for i in 0..n_words {
        let len = 1 + (rng.next_u32() % 12) as usize;
        for slot in word.iter_mut().take(len) {
            *slot = b'a' + (rng.next_u32() % 26) as u8;
        }
        out.write_all(&word[..len]).map_err(|e| WordcountError::Io(e.to_string()))?;
        let sep = if i + 1 == n_words || (i + 1) % WORDS_PER_LINE == 0 { b"\n" } else { b" " };
        out.write_all(sep).map_err(|e| WordcountError::Io(e.to_string()))?;
    }
    out.flush().map_err(|e| WordcountError::Io(e.to_string()))
}
