use thiserror::Error;

/// Errors produced by the samplers, targets and diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A Cholesky factorization failed even after the full jitter ladder.
    #[error("cholesky factorization of the {what} failed (max jitter {max_jitter:e})")]
    CholeskyFailure { what: &'static str, max_jitter: f64 },

    /// A step produced a non-finite coordinate.
    #[error("non-finite update at iteration {iteration}, particle {particle}")]
    NonFiniteUpdate { iteration: usize, particle: usize },

    /// The averaged metric is not positive definite (degenerate ensemble).
    #[error("kernel metric is not positive definite")]
    DegenerateMetric,

    #[error("problem size {size} exceeds the limit {limit}")]
    SizeExceeded { size: usize, limit: usize },

    /// Conjugate gradients met a direction with non-positive curvature.
    #[error("conjugate gradient breakdown at iteration {iteration}: p'Ap = {curvature:e}")]
    Breakdown { iteration: usize, curvature: f64 },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),
}

pub type Result<T> = std::result::Result<T, Error>;
