//! Seeded, stream-addressable randomness.
//!
//! Every consumer owns its own stream, derived from the root seed and a label,
//! so adding a new consumer never perturbs the draws seen by existing ones.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// FNV-1a hash, used for stream derivation and parameter checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SeedRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// Serializable snapshot of a stream position, for exact training resume.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeedRng {
            seed,
            stream,
            inner,
        }
    }

    /// Child stream addressed by label; independent of draws made on `self`.
    pub fn derive(&self, label: &str) -> SeedRng {
        Self::with_stream(self.seed, fnv1a(label.as_bytes()))
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut rng = Self::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn usize_below(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.usize_below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out.iter_mut() {
            *v = self.normal() * std;
        }
    }
}
