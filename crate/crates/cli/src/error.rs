use std::path::PathBuf;

use deepj_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING_INPUT: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(CoreError::Config(_) | CoreError::Usage(_)) => EXIT_CONFIG,
            CliError::MissingInput(_) | CliError::Input(_) | CliError::Core(CoreError::Input(_)) => EXIT_MISSING_INPUT,
            _ => EXIT_RUNTIME,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}
