//! Man-in-the-middle interception point for tamper-detection tests.
//!
//! Wraps any channel and applies a mutation to each envelope in transit,
//! after the sender signed it, so the receiver's verification sees exactly
//! what an on-path attacker could produce.

use crate::codec::Envelope;

use super::{Channel, ChannelError};

/// A channel whose outgoing envelopes pass through a mutation hook.
pub struct MitmChannel<C: Channel> {
    inner: C,
    mutate: Box<dyn FnMut(&mut Envelope) + Send>,
}

impl<C: Channel> MitmChannel<C> {
    pub fn new(inner: C, mutate: impl FnMut(&mut Envelope) + Send + 'static) -> Self {
        MitmChannel { inner, mutate: Box::new(mutate) }
    }

    /// Flip one bit of the payload, chosen by `bit_index` modulo the
    /// payload's bit length. Signed envelopes keep their (now stale)
    /// signature, which is the attack the registry must catch.
    pub fn bit_flipper(inner: C, bit_index: usize) -> Self {
        Self::new(inner, move |e| {
            if !e.payload.is_empty() {
                let bit = bit_index % (e.payload.len() * 8);
                e.payload[bit / 8] ^= 1 << (bit % 8);
            }
        })
    }
}

impl<C: Channel> Channel for MitmChannel<C> {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        let mut tampered = envelope.clone();
        (self.mutate)(&mut tampered);
        self.inner.send(&tampered)
    }

    fn recv(&mut self) -> Result<Envelope, ChannelError> {
        self.inner.recv()
    }

    fn close(&mut self) -> Result<(), ChannelError> {
        self.inner.close()
    }
}
