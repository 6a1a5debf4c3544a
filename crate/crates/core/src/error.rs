use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric positive definite (pivot {pivot} at index {index})")]
    NotSpd { index: usize, pivot: f64 },

    #[error("function value is not finite at perturbation index {0}")]
    NonFiniteFunctionValue(usize),

    #[error("regularization Gram matrix is singular; use a positive ridge")]
    SingularQ,

    #[error("constraint matrix is rank deficient (Schur complement not invertible)")]
    SingularSchur,

    #[error("merge solution was produced for a different problem")]
    StaleFactorization,

    #[error("parameter set signatures differ: {0}")]
    SignatureMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, trajectory: Vec<f64> },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate denominator for concept {concept}: {value}")]
    DegenerateDenominator { concept: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
