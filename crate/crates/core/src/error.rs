use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Extents that do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Two modalities whose non-channel extents differ were handed to a
    /// variant that needs them aligned.
    #[error("unaligned spatial dimensions: {0}")]
    UnalignedSpatial(String),

    /// A value outside the domain of an operation (e.g. a zero extent).
    #[error("domain error: {0}")]
    Domain(String),

    /// Misuse of an API (e.g. calling backward twice on one tape).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// A non-finite loss during training. `component` names the first
    /// parameter (or activation) that went bad.
    #[error("non-finite loss at epoch {epoch}, step {step}: {component}")]
    NonFinite {
        epoch: usize,
        step: usize,
        component: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
