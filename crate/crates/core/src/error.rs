//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: configuration problems,
//! numeric failures, serialized-format problems, and architecture mismatches
//! are kept distinct so the binary can report them as different codes.

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between operands; names both shapes.
    #[error("dimension mismatch: {op} with {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// Invalid configuration (bad field value, bad combination).
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure: divergence, non-convergence, NaN gradients.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Violated call contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Operation not defined for this adapter kind.
    #[error("unsupported adapter kind: {0}")]
    UnsupportedKind(String),

    /// Token or value outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed serialized artifact (checkpoint magic, truncation, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Two artifacts that must agree structurally do not.
    #[error("architecture mismatch: {0}")]
    Mismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 format,
    /// 5 mismatch, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format(_) => 4,
            Error::Mismatch(_) => 5,
            _ => 1,
        }
    }
}
