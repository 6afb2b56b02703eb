use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("inconsistent landmark count: record {id} has {found}, expected {expected} for view {view}")]
    InconsistentLandmarkCount {
        id: String,
        view: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate id {id} within modality {modality} / view {view}")]
    DuplicateId {
        id: String,
        modality: String,
        view: String,
    },

    #[error("id {id} ({view}) has no counterpart in modality {missing}")]
    Unpaired {
        id: String,
        view: String,
        missing: String,
    },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid landmark: {0}")]
    InvalidLandmark(String),

    #[error("unknown id {0}")]
    UnknownId(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
