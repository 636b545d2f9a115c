use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates one of its documented bounds.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: parse error at record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    /// Data loaded fine but breaks a dataset invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("{0}")]
    InvalidInput(String),

    /// Two artifacts were produced against different answer vocabularies.
    #[error("vocabulary hash mismatch: {expected} != {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("training diverged at step {step}: loss is not finite (parameter norm {param_norm:.6e})")]
    Diverged { step: usize, param_norm: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from a bad configuration or a broken
    /// invariant rather than from the environment.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::VocabularyMismatch { .. }
        )
    }
}
