use thiserror::Error;

/// Errors raised by grid construction, assembly, solvers and samplers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("node index {index} out of bounds for grid with {len} nodes")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("length-scale must be positive and finite, got {value} at node {node}")]
    NonPositiveLengthScale { node: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular or indefinite matrix: {0}")]
    Singular(String),

    #[error("dense oracle size guard exceeded: {size} > {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
