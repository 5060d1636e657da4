//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the operation's shape rules.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced or received a NaN/Inf where finite values are required.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// A vector or matrix row had (near-)zero norm where a direction is required.
    /// Deliberately not epsilon-fixed: a silent fix would hide representation collapse.
    #[error("zero-norm input in {op} (row {row})")]
    ZeroNorm { op: &'static str, row: usize },

    /// Logarithm of a non-positive value. The batch objective clamps similarities
    /// before every log, so hitting this means a clamp was bypassed.
    #[error("log of non-positive value {value} at index {index}; a clamp was bypassed")]
    LogDomain { index: usize, value: f64 },

    /// Invalid configuration, spec, or operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An exact-enumeration guard was exceeded. Guards are hard errors, never
    /// truncations, so every reported verification stays exact.
    #[error("enumeration guard exceeded: {0}")]
    Guard(String),

    /// Malformed artifact file (bad magic, version, or layout).
    #[error("file format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
