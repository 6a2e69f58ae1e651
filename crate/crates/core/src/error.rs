use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("smoothing width must be positive; use the exact density for eps = 0")]
    ZeroSmoothing,

    #[error("load is not balanced: {0}")]
    Unbalanced(String),

    #[error("input has nonzero mean {mean:e} along the boundary (tolerance {tol:e})")]
    NonzeroMean { mean: f64, tol: f64 },

    #[error("difference of the laminate end states is not symmetric rank one")]
    NotRankOne,

    #[error("load direction at boundary point ({x}, {y}) is tangential")]
    TangentialLoad { x: f64, y: f64 },

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("ghost layers have not been populated")]
    GhostsNotPopulated,

    #[error("boundary data incompatible with the field: {0}")]
    BoundaryMismatch(String),

    #[error("line search failed: step underflow at iteration {iteration}")]
    LineSearch { iteration: usize },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
