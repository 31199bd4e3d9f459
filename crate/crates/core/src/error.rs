use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("probability {value} outside the open interval (0, 1) in {context}")]
    Domain { context: &'static str, value: f64 },

    #[error("observation set is empty")]
    EmptyObservations,

    #[error("link infeasible at this blocklength: rate {rate} bit/s is not positive")]
    LinkInfeasible { rate: f64 },

    #[error("engine constant varsigma must be nonzero")]
    SingularEngine,

    #[error("matrix `{name}` is not symmetric positive semidefinite (min eigenvalue {min_eigenvalue})")]
    NotPositiveSemidefinite { name: &'static str, min_eigenvalue: f64 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("csv output failed: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
