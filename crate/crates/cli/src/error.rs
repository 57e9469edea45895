//! Process-level error taxonomy mapped onto exit codes: 1 for usage
//! problems, 2 for data problems, 3 for verification failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Verification(_) => 3,
        }
    }

    /// Wraps any library error as a data problem with context.
    pub fn data(context: &str, err: impl std::fmt::Display) -> Self {
        Self::Data(format!("{context}: {err}"))
    }
}
