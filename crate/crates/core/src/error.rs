use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("output of backward must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("variable {0} is not recorded on this tape")]
    NotOnTape(usize),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("insufficient samples for {class}: need {needed}, have {available} (short by {})", needed - available)]
    InsufficientSamples {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("weights format error: {0}")]
    Format(String),

    #[error("weights version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("{strategy} requires the {model} model, which was not provided")]
    ModelMissing {
        strategy: &'static str,
        model: &'static str,
    },

    #[error("image {id}: {source}")]
    Image {
        id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
