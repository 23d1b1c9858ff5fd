use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range [0, {bound}) for batch element {batch}")]
    Index {
        op: &'static str,
        batch: usize,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("non-finite loss {loss} at iteration {iter} (rho = {rho})")]
    NonFiniteLoss { iter: usize, rho: f64, loss: f64 },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Dataset ingestion failures.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("missing data file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: size {size} bytes is not a multiple of the {record}-byte record")]
    BadSize {
        path: PathBuf,
        size: u64,
        record: usize,
    },
    #[error("{path}: record {record} has label {label} outside [0, {classes})")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u32,
        classes: usize,
    },
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated file")]
    Truncated { path: PathBuf },
    #[error("{path}: read failed: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Checkpoint decoding and compatibility failures.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint incompatible with model; mismatched tensors: {}", .0.join(", "))]
    Mismatch(Vec<String>),
}
