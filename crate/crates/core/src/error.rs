use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while reading IDX or CIFAR-10 files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    BadLength { path: PathBuf, len: usize, record: usize },
    #[error("bad label {label} at record {index} (class count {classes})")]
    BadLabel { index: usize, label: usize, classes: usize },
}

/// Errors raised by the checkpoint codec.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad format: not a checkpoint file")]
    BadFormat,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint scalar type tag {found} does not match the requested type {expected}")]
    DtypeMismatch { found: u8, expected: u8 },
    #[error("spec digest mismatch: checkpoint has {found}, network expects {expected}")]
    SpecDigestMismatch { found: String, expected: String },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint payload checksum mismatch")]
    ChecksumMismatch,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("missing anchor checkpoint for epoch {0}")]
    MissingAnchor(u32),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Compute,
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::Json(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::MissingAnchor(_) => {
                ErrorCategory::Data
            }
            Error::InvalidSpec(_) | Error::Shape { .. } | Error::InvalidArgument(_) => {
                ErrorCategory::Compute
            }
        }
    }
}
