use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("plane too small for spatial gradients: {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("bad kernel: {0}")]
    BadKernel(String),
    #[error("kernel has zero norm")]
    ZeroKernel,
    #[error("offset ({dx}, {dy}) does not fit in a {size}x{size} kernel")]
    OutOfRing { size: usize, dx: i64, dy: i64 },
    #[error("kernel size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {0} has no training sequences")]
    EmptyClass(usize),
    #[error("{0} out of range")]
    OutOfRange(String),
    #[error("bad magic bytes, not an FSQ1 file")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
