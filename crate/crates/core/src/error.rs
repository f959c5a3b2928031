use thiserror::Error;

/// Errors raised across the adapter laboratory.
#[derive(Debug, Error)]
pub enum CuaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not skew-symmetric (max |K + K^T| = {0:e})")]
    NotSkew(f64),

    #[error("matrix is not orthogonal (||Q^T Q - I||_F = {0:e})")]
    NotOrthogonal(f64),

    #[error("Cayley inverse is singular: I + Q has singular value {0:e}")]
    Singular(f64),

    #[error("probability out of range: {name} = {value}")]
    InvalidProbability { name: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CuaError>;
