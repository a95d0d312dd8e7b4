use std::io;
use std::path::{Path, PathBuf};

use crate::config::ConfigError;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid configuration: {0}")]
    Usage(String),
    #[error("cannot read config file {path}: {source}")]
    ConfigFile { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::ConfigFile { .. } => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Diverged { .. } => 4,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn data(path: &Path, what: impl std::fmt::Display) -> CliError {
        CliError::Data(format!("{}: {what}", path.display()))
    }
}

impl From<alps_core::Error> for CliError {
    fn from(e: alps_core::Error) -> Self {
        match e {
            alps_core::Error::Config(m) => CliError::Usage(m),
            alps_core::Error::Diverged { epoch, detail } => CliError::Diverged { epoch, detail },
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
