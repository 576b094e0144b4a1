use std::path::PathBuf;

use frictuner_core::Error as CoreError;

/// Failures surfaced by the harness, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Divergence(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Data(_) => 2,
            HarnessError::Divergence(_) => 3,
            HarnessError::Io { .. } => 4,
            HarnessError::Numeric(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence { .. } => HarnessError::Divergence(e.to_string()),
            CoreError::Data(_) | CoreError::NonFinite { .. } => HarnessError::Data(e.to_string()),
            CoreError::Numeric(_) | CoreError::Accuracy(_) | CoreError::Logic(_) => HarnessError::Numeric(e.to_string()),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}
