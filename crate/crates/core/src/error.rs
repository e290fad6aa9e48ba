use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: entry ({row}, {col}) differs by {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("matrix is not positive definite (non-positive Cholesky pivot)")]
    NotPositiveDefinite,

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate worker pool: noise covariance is not positive definite")]
    DegeneratePool,

    #[error("EM covariance estimate lost positive definiteness at iteration {iteration}")]
    EmLostDefiniteness { iteration: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matching search exceeded cap of {cap} workers")]
    SearchCapExceeded { cap: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
