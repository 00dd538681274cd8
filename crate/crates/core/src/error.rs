use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum ElmError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<ElmError>,
    },
}

impl ElmError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        ElmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            already @ ElmError::Stage { .. } => already,
            other => ElmError::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Process exit code: 2 for data/contract problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ElmError::Numeric(_) => 3,
            ElmError::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, ElmError>;
