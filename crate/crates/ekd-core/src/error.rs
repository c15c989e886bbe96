//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EkdError>;

#[derive(Debug, Error)]
pub enum EkdError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate embedding: row {row} has L2 norm {norm:.3e} (< 1e-12)")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range (num classes {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("length mismatch: {context} ({left} vs {right})")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error(
        "target FPR {target:.3e} below resolution: needs at least {required} negative pairs, \
         have {available}"
    )]
    FprBelowResolution {
        target: f64,
        required: usize,
        available: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged: loss is not finite at step {step}")]
    Diverged { step: usize },

    #[error("embedding row {row} not unit-norm (norm {norm}, tolerance {tol})")]
    NotNormalized { row: usize, norm: f64, tol: f64 },

    #[error("{path}: {message}")]
    FileFormat { path: String, message: String },

    #[error("config hash mismatch: checkpoint carries {found:#018x}, expected {expected:#018x}")]
    ConfigHashMismatch { found: u64, expected: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
