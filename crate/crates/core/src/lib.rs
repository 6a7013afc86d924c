//! Desk-scale laboratory for parameter-efficient adapters trained with
//! verifiable-reward policy optimization.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` matrices, reverse-mode autodiff, a seeded
//!   counter-based RNG, and a one-sided Jacobi SVD.
//! - [`adapters`]: every adapter parameterization (LoRA and its structural,
//!   initialization-based, and efficiency-driven variants) as an attachable
//!   wrapper around a frozen linear layer.
//! - [`policy`]: a tiny decoder-only transformer whose named projections
//!   (`q,k,v,o,gate,up,down`) host adapters.
//! - [`tasks`]: synthetic verifiable tasks with a strict binary reward.
//! - [`rlvr`]: GRPO / DAPO / Dr. GRPO objectives, group advantages,
//!   dynamic sampling, and the Adam step.
//! - [`rollout`]: evaluation-side generation and Avg@k / Pass@1-in-k.
//! - [`spectra`]: projection of weight updates onto the frozen weight's
//!   singular basis (per-index magnitudes and cumulative energy).
//! - [`harness`]: JSON experiment configs, binary checkpoints, CSV metrics,
//!   and the train / eval / spectra / compare runners.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod policy;
pub mod rlvr;
pub mod rollout;
pub mod spectra;
pub mod tasks;
pub mod tensor;
pub mod tokens;

pub use error::{Error, Result};
pub use tensor::{Matrix, Param, Rng};
