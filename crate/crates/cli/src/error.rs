use attnlab_core::Error as CoreError;
use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// A checked property failed.
    #[error("violation: {0}")]
    Violation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Violation(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(_) | CoreError::Format { .. } => CliError::Io(e.to_string()),
            CoreError::InvalidArgument(_)
            | CoreError::InvalidPartition(_)
            | CoreError::InvalidPosition { .. }
            | CoreError::DimensionMismatch { .. }
            | CoreError::Empty(_) => CliError::Config(e.to_string()),
            // Anything else means a numeric routine broke an internal invariant.
            _ => CliError::Violation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
