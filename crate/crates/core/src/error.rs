use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::kvfile::KvError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("batch normalisation needs at least 2 samples in {mode} mode, got {got}")]
    BatchTooSmall { mode: &'static str, got: usize },
    #[error("{0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Format(#[from] FormatError),
    #[error("no gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("training diverged: first non-finite tensor is {tensor}")]
    Diverged { tensor: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Problems reading the binary checkpoint and bundle files.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
