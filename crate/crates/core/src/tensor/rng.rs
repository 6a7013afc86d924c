//! Deterministic RNG with named substreams.
//!
//! Every stream is a ChaCha8 counter-based generator keyed by hashing the
//! parent key together with a substream name and index. Substreams derived
//! from the same parent are independent of each other and of how much the
//! parent has been consumed, so e.g. evaluation draws never perturb training
//! reproducibility.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::matrix::Matrix;

const ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    key: [u8; 32],
    stream: ChaCha8Rng,
}

impl Rng {
    /// Root stream for a run; the same seed always yields the same streams.
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"peftlab.rng.root");
        h.update(seed.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        Rng {
            seed,
            key,
            stream: ChaCha8Rng::from_seed(key),
        }
    }

    /// Identifier of the underlying generator.
    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `(name, index)`. Derivation uses the
    /// parent key, not the parent's position, so substreams are stable no
    /// matter how many values the parent has produced.
    pub fn substream(&self, name: &str, index: u64) -> Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([0x1f]);
        h.update(name.as_bytes());
        h.update([0x1f]);
        h.update(index.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        Rng {
            seed: self.seed,
            key,
            stream: ChaCha8Rng::from_seed(key),
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.stream.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.stream.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| sigma * self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }

    /// Inverted-dropout mask: entries are `1/keep` with probability `keep`,
    /// else `0`, so the masked branch keeps its expectation.
    pub fn dropout_mask(&mut self, rows: usize, cols: usize, drop_p: f64) -> Matrix {
        let keep = 1.0 - drop_p;
        Matrix::from_fn(rows, cols, |_, _| {
            if self.next_f64() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }

    /// Sample an index from an unnormalized, non-negative weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0, "categorical weights must have positive mass");
        let mut target = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
