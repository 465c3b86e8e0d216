use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("cholesky factorization failed for individual `{0}` after jitter")]
    Cholesky(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite log-posterior: {0}")]
    NonFinite(String),
    #[error("insufficient input: {0}")]
    Insufficient(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable class used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "DimensionError",
            Error::NotSpd(_) => "NotSpdError",
            Error::Cholesky(_) => "CholeskyError",
            Error::InvalidParameter(_) => "ParameterError",
            Error::Budget(_) => "BudgetError",
            Error::Quadrature(_) => "QuadratureError",
            Error::Config(_) => "ConfigError",
            Error::Data(_) => "DataError",
            Error::NonFinite(_) => "NonFiniteError",
            Error::Insufficient(_) => "InsufficientInputError",
            Error::Io(_) => "IoError",
            Error::Csv(_) => "DataError",
        }
    }
}
