use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{col}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        col: usize,
        message: String,
    },
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] hetreg_core::Error),
    #[error("{failed} of {total} properties failed")]
    PropertyFailure { failed: usize, total: usize },
    #[error("{0} run(s) diverged; partial outputs kept")]
    Diverged(usize),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 property failure, 2 configuration/input error, 3 divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::PropertyFailure { .. } => 1,
            CliError::Diverged(_) => 3,
            CliError::Core(hetreg_core::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
