use thiserror::Error;

/// Errors raised by the filters, metrics and campaign harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemiDefinite { min_eigenvalue: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetricInput { asymmetry: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("function returned a non-finite value at probe {probe} ({point:?})")]
    NonFiniteEvaluation { probe: String, point: Vec<f64> },

    #[error("innovation covariance is numerically singular (condition {condition:e})")]
    SingularInnovation { condition: f64 },

    #[error("measurement noise square root is numerically singular")]
    SingularNoiseSqrt,

    #[error("partitioned update exceeded {0} rounds")]
    RoundLimitExceeded(usize),

    #[error("all particle likelihoods underflowed")]
    DegenerateWeights,

    #[error("empty sample")]
    EmptySample,

    #[error("covariance is singular")]
    SingularCovariance,

    #[error("grid misses {outside:.4} of the reference mass")]
    GridTooSmall { outside: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
