use std::path::{Path, PathBuf};

use crhlab_core::CrhError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("invalid config value `{key}`: {message}")]
    Invalid { key: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt run data in {}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },

    #[error("csv error in {}: {message}", path.display())]
    Csv { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] CrhError),

    #[error("{0}")]
    Usage(String),
}

impl RunnerError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn corrupt(path: &Path, message: impl Into<String>) -> Self {
        Self::Corrupt { path: path.to_path_buf(), message: message.into() }
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        Self::Csv { path: path.to_path_buf(), message: e.to_string() }
    }
}

pub type RunnerResult<T> = std::result::Result<T, RunnerError>;
