use std::process::ExitCode;

use mmlstm_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) | CliError::Core(Error::InvalidArgument(_)) => 2,
            CliError::Core(Error::Format { .. } | Error::Shape { .. }) => 3,
            CliError::Core(Error::Numeric(_)) | CliError::GradCheck(_) => 4,
            CliError::Core(Error::Io { .. }) | CliError::Output { .. } => 5,
        })
    }
}
