//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("state diverged in layer {layer} at step {step}")]
    DivergedState { layer: usize, step: usize },

    #[error("tape is stale: recorded for parameter version {tape_version}, network is at {net_version}")]
    StaleTape { tape_version: u64, net_version: u64 },

    #[error("batch of {0} is degenerate for batch statistics (need at least 2 samples)")]
    DegenerateBatch(usize),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite gradient in {segment} at index {index} (optimizer step {step})")]
    NanGradient {
        segment: String,
        index: usize,
        step: u64,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("data format error in {path}: {detail}")]
    DataFormat { path: String, detail: String },

    #[error("integrity check failed in {path}: {detail}")]
    Integrity { path: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
