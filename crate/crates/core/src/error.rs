//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an API contract: shape mismatch, bad argument,
    /// tensors from different tapes, and so on.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Adaptation produced a non-finite loss or parameter value.
    #[error("divergence at inner step {step}: {what}")]
    Divergence { step: usize, what: String },

    /// A pool cannot supply what an episode needs (too few classes or
    /// examples per class).
    #[error("capacity: {0}")]
    Capacity(String),

    /// A data file could not be read or decoded; names the path.
    #[error("ingest {path}: {what}")]
    Ingest { path: String, what: String },

    /// Configuration file or field rejected.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint file malformed or incompatible with the requested run.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
