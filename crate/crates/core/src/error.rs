//! Error type shared across the simulator core.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or tape dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (unknown loss, zero sequence length, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value produced from finite inputs.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation called in the wrong order (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),

    /// Cross-site protocol violation (architecture mismatch, weight divergence).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed input file (bad magic, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// Wire frame could not be encoded or decoded.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Empty input where at least one sample is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
