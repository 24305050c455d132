use std::path::PathBuf;
use std::process::ExitCode;

use kvevict::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Engine(#[from] kvevict::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Config(_) => ErrorClass::Config,
            CliError::Io { .. } => ErrorClass::Io,
            CliError::Engine(e) => e.class(),
        }
    }

    /// 2 for configuration, 3 for I/O, 4 for data errors.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Io => 3,
            ErrorClass::Data => 4,
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;
