use std::path::PathBuf;

/// Errors produced across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("empty class: {0}")]
    EmptyClass(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("corrupt dataset at {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

impl Error {
    /// Stable kebab-case name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidState(_) => "invalid-state",
            Error::EmptyClass(_) => "empty-class",
            Error::DegenerateGeometry(_) => "degenerate-geometry",
            Error::CorruptDataset { .. } => "corrupt-dataset",
            Error::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
