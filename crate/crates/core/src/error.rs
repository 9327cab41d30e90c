//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file does not follow the expected container format (bad magic,
    /// unknown dtype tag, unsupported rank, malformed structured text).
    #[error("{path}: format error: {detail}")]
    Format { path: PathBuf, detail: String },

    /// The file follows the format but its byte content is inconsistent
    /// with its own header.
    #[error("{path}: corrupt file: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("{context}: schema version {found} not supported (expected <= {supported})")]
    Version {
        context: String,
        found: u32,
        supported: u32,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {class_id} declared in phase {phase} already belongs to phase {earlier_phase}")]
    Disjoint {
        class_id: i32,
        earlier_phase: u32,
        phase: u32,
    },

    #[error("stale filter report: {0}")]
    StaleReport(String),

    #[error("no stored centroid for class {class_id}")]
    MissingCentroid { class_id: i32 },

    #[error("class {class_id} has not been seen by the predictor")]
    UnseenClass { class_id: i32 },

    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Corruption { .. } => 4,
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
