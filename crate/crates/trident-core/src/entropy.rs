//! Pluggable randomness.
//!
//! Every random decision in the crate is derived from a raw byte stream via
//! the sampling helpers below. That makes any draw sequence replayable: feed
//! the same bytes, get the same codebooks, labels, plans, salts, and tokens.
//! Three sources are provided:
//!
//! - [`OsEntropy`] — operating-system randomness, used in production.
//! - [`SeededEntropy`] — a ChaCha20 stream expanded from a seed, used by the
//!   CLI `--seed` flag for reproducible registration.
//! - [`RecordedEntropy`] — exact byte replay, used by tests to inject chosen
//!   draw outcomes (see [`RecordingBuilder`]).

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EntropyError {
    #[error("operating system entropy unavailable: {0}")]
    Unavailable(String),
    #[error("recorded entropy stream exhausted")]
    Exhausted,
}

/// A source of raw random bytes. All sampling is built on `fill_bytes` so
/// that a recorded byte stream reproduces every derived draw.
pub trait EntropySource {
    fn fill_bytes(&mut self, buf: &mut [u8]) -> Result<(), EntropyError>;
}

impl<E: EntropySource + ?Sized> EntropySource for &mut E {
    fn fill_bytes(&mut self, buf: &mut [u8]) -> Result<(), EntropyError> {
        (**self).fill_bytes(buf)
    }
}

impl<E: EntropySource + ?Sized> EntropySource for Box<E> {
    fn fill_bytes(&mut self, buf: &mut [u8]) -> Result<(), EntropyError> {
        (**self).fill_bytes(buf)
    }
}

/// Operating-system randomness.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsEntropy;

impl EntropySource for OsEntropy {
    fn fill_bytes(&mut self, buf: &mut [u8]) -> Result<(), EntropyError> {
        getrandom::getrandom(buf).map_err(|e| EntropyError::Unavailable(e.to_string()))
    }
}

/// Deterministic stream expanded from a seed with ChaCha20.
#[derive(Debug, Clone)]
pub struct SeededEntropy {
    rng: ChaCha20Rng,
}

impl SeededEntropy {
    /// Seed bytes of any length; they are right-padded / truncated to 32.
    pub fn from_seed_bytes(seed: &[u8]) -> Self {
        let mut key = [0u8; 32];
        for (dst, src) in key.iter_mut().zip(seed.iter()) {
            *dst = *src;
        }
        Self {
            rng: ChaCha20Rng::from_seed(key),
        }
    }
}

impl EntropySource for SeededEntropy {
    fn fill_bytes(&mut self, buf: &mut [u8]) -> Result<(), EntropyError> {
        self.rng.fill_bytes(buf);
        Ok(())
    }
}

/// Replays a fixed byte stream, erroring when it runs out.
#[derive(Debug, Clone)]
pub struct RecordedEntropy {
    bytes: Vec<u8>,
    pos: usize,
}

impl RecordedEntropy {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Bytes not yet consumed.
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl EntropySource for RecordedEntropy {
    fn fill_bytes(&mut self, buf: &mut [u8]) -> Result<(), EntropyError> {
        if self.remaining() < buf.len() {
            return Err(EntropyError::Exhausted);
        }
        buf.copy_from_slice(&self.bytes[self.pos..self.pos + buf.len()]);
        self.pos += buf.len();
        Ok(())
    }
}

/// Uniform value in `0..n` for `1 <= n <= 256`, by single-byte rejection.
///
/// A byte `b < (256 / n) * n` maps to `b % n`; other bytes are discarded and
/// a fresh byte drawn. Any target value `v` can therefore be forced by a
/// recorded stream containing the single byte `v`.
pub fn uniform_below<E: EntropySource + ?Sized>(
    entropy: &mut E,
    n: u32,
) -> Result<u32, EntropyError> {
    assert!((1..=256).contains(&n), "uniform_below range out of bounds");
    let limit = (256 / n) * n;
    loop {
        let mut b = [0u8; 1];
        entropy.fill_bytes(&mut b)?;
        let v = u32::from(b[0]);
        if v < limit {
            return Ok(v % n);
        }
    }
}

/// Builds the byte stream for [`RecordedEntropy`] so tests can dictate the
/// outcome of each draw. Each `push_*` emits exactly the bytes the matching
/// sampler consumes when no rejection occurs.
#[derive(Debug, Default, Clone)]
pub struct RecordingBuilder {
    bytes: Vec<u8>,
}

impl RecordingBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.bytes.extend_from_slice(bytes);
        self
    }

    /// Encode the outcome `v` of a `uniform_below(_, n)` draw.
    pub fn push_uniform(&mut self, v: u32, n: u32) -> &mut Self {
        assert!((1..=256).contains(&n) && v < n, "value outside draw range");
        self.bytes.push(v as u8);
        self
    }

    pub fn into_entropy(self) -> RecordedEntropy {
        RecordedEntropy::new(self.bytes)
    }
}
