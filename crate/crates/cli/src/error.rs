use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation: unknown flags, missing arguments.
    #[error("{0}")]
    Usage(String),
    /// Input that parses but violates the model or file contracts.
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<agv_codesign::Error> for CliError {
    fn from(e: agv_codesign::Error) -> Self {
        match e {
            agv_codesign::Error::Csv(msg) => CliError::Internal(anyhow::anyhow!("csv output failed: {msg}")),
            other => CliError::Validation(other.to_string()),
        }
    }
}
