//! Numeric substrate: dense `f64` matrices, a seeded counter-based RNG with
//! named substreams, one-sided Jacobi SVD, and reverse-mode autodiff.

mod graph;
mod matrix;
mod rng;
mod svd;

pub use graph::{finite_diff_grad, Graph, NodeId};
pub use matrix::Matrix;
pub use rng::Rng;
pub use svd::{svd, Svd};

/// A named tensor with a trainability flag.
///
/// Frozen parameters (`trainable == false`) must never be touched by an
/// optimizer step; the flag also drives trainable-parameter accounting and
/// checkpoint manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix, trainable: bool) -> Self {
        Param {
            name: name.into(),
            value,
            trainable,
        }
    }

    /// Number of scalar entries.
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.len() == 0
    }
}
