use thiserror::Error;

/// Failures raised by the analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("eigensolver did not converge on a {0}x{0} matrix")]
    EigenFailure(usize),
    #[error("{what} is not Hermitian (deviation {deviation:e})")]
    NotHermitian { what: &'static str, deviation: f64 },
    #[error("{what} is not a projection (deviation {deviation:e})")]
    NotProjection { what: &'static str, deviation: f64 },
    #[error("{what} is not positive (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositive {
        what: &'static str,
        min_eigenvalue: f64,
    },
    #[error("exponent p = {0} is below 1")]
    InvalidExponent(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("level {level} exceeds grid depth {depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular operator: {0}")]
    Singular(String),
    #[error("inputs do not belong together: {0}")]
    Mismatch(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
