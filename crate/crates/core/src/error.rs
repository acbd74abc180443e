use thiserror::Error;

/// Errors raised by the simulation, policy and training layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or references something unknown.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite weights, inputs or results.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A checkpoint could not be decoded.
    #[error("checkpoint load error: {0}")]
    Load(#[from] LoadError),

    /// A training iteration could not proceed.
    #[error("training error: {0}")]
    Training(String),
}

/// Reasons a checkpoint byte stream is rejected.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("unknown architecture tag {0}")]
    UnknownArch(u32),
    #[error("architecture mismatch: checkpoint holds {found}, expected {expected}")]
    ArchMismatch { found: String, expected: String },
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
