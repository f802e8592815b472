//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream identified by `(seed, stream id)`.
//! The position within the keystream is part of the state, so a stream can be
//! saved and restored exactly. Child streams are derived by hashing the parent
//! stream id with a caller-chosen label, which lets independent workers (or
//! independent purposes within one worker) draw without ever sharing state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Length of [`Rng::state_bytes`].
pub const STATE_LEN: usize = 41;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    /// Second Box–Muller output waiting to be returned.
    spare: Option<f64>,
}

/// SplitMix64 finaliser, used to spread stream labels.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner, spare: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream. Deterministic in `(seed, self.stream, label)`
    /// and unaffected by how much of the parent has been consumed.
    pub fn child(&self, label: u64) -> Rng {
        Rng::with_stream(self.seed, mix(self.stream ^ mix(label)))
    }

    /// Child stream keyed by a string label and an index.
    pub fn named(&self, label: &str, index: u64) -> Rng {
        let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.child(mix(h) ^ index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw via the Box–Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Sample an index from unnormalised non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Serialised state: seed, stream, keystream word position and any
    /// buffered normal draw. 41 bytes, little-endian.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STATE_LEN);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.inner.get_word_pos().to_le_bytes());
        match self.spare {
            Some(z) => {
                out.push(1);
                out.extend_from_slice(&z.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&[0u8; 8]);
            }
        }
        out
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != STATE_LEN {
            return Err(Error::Format(format!("rng state must be {STATE_LEN} bytes, got {}", bytes.len())));
        }
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let word_pos = u128::from_le_bytes(bytes[16..32].try_into().unwrap());
        let mut rng = Rng::with_stream(u64_at(0), u64_at(8));
        rng.inner.set_word_pos(word_pos);
        rng.spare = match bytes[32] {
            0 => None,
            1 => Some(f64::from_le_bytes(bytes[33..41].try_into().unwrap())),
            b => return Err(Error::Format(format!("bad rng spare flag {b}"))),
        };
        Ok(rng)
    }
}

/// Tensor of i.i.d. standard normal draws.
pub fn gaussian<S: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.normal()))
}
