use std::io;

use thiserror::Error;

/// Errors surfaced by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate specification: {0}")]
    Degenerate(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("malformed text input at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no labeled pixels: {0}")]
    NoLabels(String),
    #[error("no valid prototypes")]
    NoValidPrototypes,
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("numerical abort: {0}")]
    NumericalAbort(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
