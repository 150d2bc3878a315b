//! Message envelope and its canonical byte encoding.
//!
//! Every transport exchanges the same length-prefixed frame:
//!
//! ```text
//! ┌───────────┬─────────┬───────────┬──────────┬──────┬─────────────┬─────────────┬─────────┐
//! │ total_len │ version │ sender_id │ sequence │ flag │ signature   │ payload_len │ payload │
//! │  u32 BE   │   u8    │ 16 bytes  │  u64 BE  │  u8  │ 64B if flag │   u32 BE    │  bytes  │
//! └───────────┴─────────┴───────────┴──────────┴──────┴─────────────┴─────────────┴─────────┘
//! ```
//!
//! `total_len` counts everything after itself. All integers are big-endian
//! and all lengths are explicit, so equal envelopes encode to identical
//! bytes and the layout can be reimplemented from this comment alone.
//!
//! A signature, when present, covers `version ‖ sender_id ‖ sequence ‖
//! payload` (see [`Envelope::signing_bytes`]), binding the header fields so
//! a tampered frame cannot re-use a signature from another message.

use thiserror::Error;

/// Wire format version emitted and accepted by this crate.
pub const VERSION: u8 = 1;

/// Length of a service identifier in bytes.
pub const SENDER_ID_LEN: usize = 16;

/// Length of an envelope signature in bytes.
pub const SIGNATURE_LEN: usize = 64;

/// Fixed header bytes in the body: version + sender + sequence + flag + payload_len.
const FIXED_BODY_LEN: usize = 1 + SENDER_ID_LEN + 8 + 1 + 4;

/// Identifies the service that produced an envelope.
pub type SenderId = [u8; SENDER_ID_LEN];

/// Detached signature over the envelope header and payload.
pub type Signature = [u8; SIGNATURE_LEN];

/// Errors produced by [`encode`] and [`decode`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    /// Payload length does not fit the 32-bit length field.
    #[error("payload too large: {0} bytes")]
    PayloadTooLarge(usize),
    /// Input ended before the declared length was available.
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    /// Version byte differs from [`VERSION`].
    #[error("bad version: {0}")]
    BadVersion(u8),
    /// Inner lengths or tags are inconsistent with the layout.
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

/// Typed message content carried by an [`Envelope`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Ask the peer to count the words of a UTF-8 document.
    CountRequest { text: Vec<u8> },
    /// The word count computed for a previous request.
    CountResponse { count: u64 },
    /// Opaque bytes, used by echo and property tests.
    Raw(Vec<u8>),
}

const TAG_COUNT_REQUEST: u8 = 0;
const TAG_COUNT_RESPONSE: u8 = 1;
const TAG_RAW: u8 = 2;

impl Payload {
    /// Canonical byte form: one tag byte followed by the variant data.
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Payload::CountRequest { text } => {
                let mut out = Vec::with_capacity(1 + text.len());
                out.push(TAG_COUNT_REQUEST);
                out.extend_from_slice(text);
                out
            }
            Payload::CountResponse { count } => {
                let mut out = Vec::with_capacity(9);
                out.push(TAG_COUNT_RESPONSE);
                out.extend_from_slice(&count.to_be_bytes());
                out
            }
            Payload::Raw(bytes) => {
                let mut out = Vec::with_capacity(1 + bytes.len());
                out.push(TAG_RAW);
                out.extend_from_slice(bytes);
                out
            }
        }
    }

    /// Inverse of [`Payload::encode`].
    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let (&tag, rest) = bytes
            .split_first()
            .ok_or(CodecError::Malformed("empty payload"))?;
        match tag {
            TAG_COUNT_REQUEST => Ok(Payload::CountRequest { text: rest.to_vec() }),
            TAG_COUNT_RESPONSE => {
                let count = rest
                    .try_into()
                    .map(u64::from_be_bytes)
                    .map_err(|_| CodecError::Malformed("count response is not 8 bytes"))?;
                Ok(Payload::CountResponse { count })
            }
            TAG_RAW => Ok(Payload::Raw(rest.to_vec())),
            _ => Err(CodecError::Malformed("unknown payload tag")),
        }
    }
}

/// Framed message exchanged over any transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub version: u8,
    pub sender_id: SenderId,
    pub sequence: u64,
    /// Encoded [`Payload`] bytes.
    pub payload: Vec<u8>,
    pub signature: Option<Signature>,
}

impl Envelope {
    /// Unsigned envelope carrying already-encoded payload bytes.
    pub fn new(sender_id: SenderId, sequence: u64, payload: Vec<u8>) -> Self {
        Envelope { version: VERSION, sender_id, sequence, payload, signature: None }
    }

    /// Convenience constructor that encodes a typed [`Payload`].
    pub fn with_payload(sender_id: SenderId, sequence: u64, payload: &Payload) -> Self {
        Self::new(sender_id, sequence, payload.encode())
    }

    /// Decode the typed payload carried by this envelope.
    pub fn typed_payload(&self) -> Result<Payload, CodecError> {
        Payload::decode(&self.payload)
    }

    /// The bytes a signature covers: `version ‖ sender_id ‖ sequence ‖ payload`.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + SENDER_ID_LEN + 8 + self.payload.len());
        out.push(self.version);
        out.extend_from_slice(&self.sender_id);
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Size of `encode(self)` in bytes, without allocating.
    pub fn encoded_len(&self) -> usize {
        let sig = if self.signature.is_some() { SIGNATURE_LEN } else { 0 };
        4 + FIXED_BODY_LEN + sig + self.payload.len()
    }
}

/// Serialize an envelope into its canonical frame.
pub fn encode(e: &Envelope) -> Result<Vec<u8>, CodecError> {
    if e.payload.len() >= u32::MAX as usize {
        return Err(CodecError::PayloadTooLarge(e.payload.len()));
    }
    let body_len = FIXED_BODY_LEN
        + e.signature.map_or(0, |_| SIGNATURE_LEN)
        + e.payload.len();
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.push(e.version);
    out.extend_from_slice(&e.sender_id);
    out.extend_from_slice(&e.sequence.to_be_bytes());
    match &e.signature {
        Some(sig) => {
            out.push(1);
            out.extend_from_slice(sig);
        }
        None => out.push(0),
    }
    out.extend_from_slice(&(e.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&e.payload);
    Ok(out)
}

/// Parse a frame produced by [`encode`]. The input must be exactly one
/// frame; trailing bytes are rejected without being inspected.
pub fn decode(bytes: &[u8]) -> Result<Envelope, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Truncated { need: 4, have: bytes.len() });
    }
    let declared = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    let have = bytes.len() - 4;
    if declared > have {
        return Err(CodecError::Truncated { need: declared, have });
    }
    if declared < have {
        return Err(CodecError::Malformed("trailing bytes after frame"));
    }
    decode_body(&bytes[4..4 + declared])
}

/// Parse a frame body (everything after the 4-byte length prefix). Stream
/// transports that have already consumed the prefix use this directly.
pub fn decode_body(body: &[u8]) -> Result<Envelope, CodecError> {
    if body.len() < FIXED_BODY_LEN {
        return Err(CodecError::Truncated { need: FIXED_BODY_LEN, have: body.len() });
    }
    let mut at = 0usize;
    let version = body[at];
    at += 1;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let sender_id: SenderId = body[at..at + SENDER_ID_LEN].try_into().unwrap();
    at += SENDER_ID_LEN;
    let sequence = u64::from_be_bytes(body[at..at + 8].try_into().unwrap());
    at += 8;
    let sig_flag = body[at];
    at += 1;
    let signature = match sig_flag {
        0 => None,
        1 => {
            if body.len() < at + SIGNATURE_LEN + 4 {
                return Err(CodecError::Truncated {
                    need: at + SIGNATURE_LEN + 4,
                    have: body.len(),
                });
            }
            let sig: Signature = body[at..at + SIGNATURE_LEN].try_into().unwrap();
            at += SIGNATURE_LEN;
            Some(sig)
        }
        _ => return Err(CodecError::Malformed("bad signature flag")),
    };
    let payload_len = u32::from_be_bytes(body[at..at + 4].try_into().unwrap()) as usize;
    at += 4;
    if body.len() - at != payload_len {
        return Err(CodecError::Malformed("payload length mismatch"));
    }
    let payload = body[at..].to_vec();
    Ok(Envelope { version, sender_id, sequence, payload, signature })
}
