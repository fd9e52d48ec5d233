use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: input of length {len} is shorter than the required {min}")]
    InputTooShort { op: &'static str, len: usize, min: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("reference signal is all zeros; metric undefined")]
    UndefinedReference,

    #[error("alignment error: visual features have {got} frames, separator expects {expected} chunks")]
    Alignment { expected: usize, got: usize },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("at least one separator branch is required")]
    NoBranches,

    #[error("pairing error: {masks} masks but {waveforms} waveforms")]
    Pairing { masks: usize, waveforms: usize },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("source {0} has zero energy")]
    DegenerateSource(usize),

    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("data mismatch: {0}")]
    DataMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
