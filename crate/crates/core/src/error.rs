use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("signal of {len} samples is shorter than one frame ({frame_len} samples)")]
    TooShort { len: usize, frame_len: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("expected a mono WAV file, found {0} channels")]
    ChannelCount(u16),

    #[error("truncated WAV file: {0}")]
    Truncated(String),

    #[error("malformed WAV file: {0}")]
    MalformedWav(String),

    #[error("source {0} is silent (zero power)")]
    SilentSource(usize),

    #[error("reference signal is silent")]
    SilentReference,

    #[error("brute-force assignment over {0} streams is too expensive; use the Hungarian solver")]
    TooManyStreams(usize),

    #[error("cost matrix must be square, found {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimal assignment requires reference sources")]
    MissingReferences,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

/// Coarse grouping used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Context { source, .. } => source.class(),
            Error::InvalidConfig(_) | Error::ConfigParse(_) | Error::MissingReferences => {
                ErrorClass::Usage
            }
            Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
