use thiserror::Error;

/// Errors raised by model construction, fitting and prediction.
#[derive(Debug, Error)]
pub enum FrkError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no candidate basis center has an observation within tau = {tau} m")]
    EmptyBasis { tau: f64 },

    #[error("degenerate trend design: condition number of T'T is {condition:.3e}")]
    DegenerateDesign { condition: f64 },

    #[error("correlation matrix is singular: {0}")]
    SingularCovariance(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("basis matrix S_M is rank deficient (rank {rank} < r = {r}); the moments estimator needs full column rank")]
    RankDeficientBinnedBasis { rank: usize, r: usize },

    #[error("bin {bin} contains no observation")]
    EmptyBin { bin: usize },

    #[error("grid of {requested} points exceeds the configured cap of {cap}")]
    GridTooLarge { requested: usize, cap: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FrkError>;
