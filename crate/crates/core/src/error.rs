use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpsrError {
    /// An input outside the mathematical domain of an operation
    /// (zero vector, out-of-range index, out-of-vocab token, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A cache ran out of room for another step.
    #[error("generation length exceeded: capacity {capacity}")]
    GenerationLength { capacity: usize },

    /// A checkpoint no longer matches the cache contents.
    #[error("stale checkpoint: expected digest {expected:#018x} at len {len}, found {found:#018x}")]
    StaleCheckpoint { len: usize, expected: u64, found: u64 },

    /// A statistic that is undefined for the given input (single-class AUC,
    /// McNemar with no discordant pairs, ...).
    #[error("undefined: {0}")]
    Undefined(String),

    /// Malformed binary or text input.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, LpsrError>;

pub(crate) fn domain(msg: impl Into<String>) -> LpsrError {
    LpsrError::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> LpsrError {
    LpsrError::Config(msg.into())
}
