use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] moesl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed input files (CSV or JSON), with location when known.
    #[error("{context}: {message}")]
    Data { context: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub(crate) fn data(context: impl Into<String>, message: impl ToString) -> Self {
        CliError::Data {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
