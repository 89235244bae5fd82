use std::io;

use thiserror::Error;

/// Errors surfaced by the library. The variants map onto the CLI exit codes:
/// I/O failures, usage/config problems, and domain failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed inconsistent shapes or out-of-range arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical domain violation, e.g. a nonpositive detector reading.
    #[error("domain error: {0}")]
    Domain(String),

    /// Calibration could not identify every species.
    #[error("calibration error: species `{species}` is not identifiable (condition number {condition:.3e})")]
    Calibration { species: String, condition: f64 },

    /// File did not start with the expected magic bytes or carries an unknown version.
    #[error("format error: {0}")]
    Format(String),

    /// File ended before the declared payload was read.
    #[error("truncated file: expected {expected} more bytes while reading {what}")]
    Truncated { what: &'static str, expected: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
