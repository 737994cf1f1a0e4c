use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("unknown layer kind byte {0}")]
    UnknownKind(u8),

    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("{found} trailing bytes after payload")]
    TrailingBytes { found: usize },

    #[error("{kind} tensor needs {expected} dims, got {found}")]
    DimCount {
        kind: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("data length {found} does not match shape product {expected}")]
    DataLength { expected: usize, found: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("bit width {0} outside [1, 8]")]
    BitsOutOfRange(usize),

    #[error("empty filter (M = 0)")]
    EmptyFilter,

    #[error("expected {expected} {what}, got {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty layer")]
    EmptyLayer,

    #[error("max-abs margin {margin:e} does not exceed 10 * eps = {needed:e}")]
    MarginTooSmall { margin: f64, needed: f64 },

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable numeric identifier, one per variant.
    pub fn code(&self) -> u8 {
        match self {
            Error::BadMagic { .. } => 1,
            Error::UnsupportedVersion(_) => 2,
            Error::UnknownKind(_) => 3,
            Error::Truncated { .. } => 4,
            Error::TrailingBytes { .. } => 5,
            Error::DimCount { .. } => 6,
            Error::InvalidShape { .. } => 7,
            Error::DataLength { .. } => 8,
            Error::ShapeMismatch { .. } => 9,
            Error::BitsOutOfRange(_) => 10,
            Error::EmptyFilter => 11,
            Error::Length { .. } => 12,
            Error::Config(_) => 13,
            Error::EmptyLayer => 14,
            Error::MarginTooSmall { .. } => 15,
            Error::NonFiniteLoss { .. } => 16,
            Error::Io(_) => 17,
        }
    }
}
