use std::io;
use std::path::{Path, PathBuf};

use bladapt_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, failed check or violated contract.
    #[error("{0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A prerequisite artifact is absent.
    #[error("missing {what} at {path}; {hint}")]
    Missing {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Core(CoreError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged(m) => CliError::Divergence(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    /// 0 success, 1 validation failure, 2 I/O, 3 numeric divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Core(_) => 1,
            CliError::Io { .. } | CliError::Missing { .. } | CliError::Format { .. } => 2,
            CliError::Divergence(_) => 3,
        }
    }
}
