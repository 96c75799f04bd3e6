//! Crate-wide error type. Numeric faults (NaN/Inf escaping a primitive) are
//! first-class errors: they are detected after every tape op and surfaced with
//! the op name rather than propagated into downstream math.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SfcError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric fault in {op}: non-finite value at flat index {index}")]
    NumericFault { op: &'static str, index: usize },

    #[error("band configuration invalid: {0}")]
    Bands(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("determinism violation: {0}")]
    Determinism(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SfcError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SfcError::Shape { op, detail: detail.into() }
    }

    /// Machine-readable error record for CLI consumers.
    pub fn kind(&self) -> &'static str {
        match self {
            SfcError::Shape { .. } => "shape",
            SfcError::NumericFault { .. } => "numeric_fault",
            SfcError::Bands(_) => "bands",
            SfcError::Config(_) => "config",
            SfcError::Format { .. } => "format",
            SfcError::Checkpoint(_) => "checkpoint",
            SfcError::Training(_) => "training",
            SfcError::Determinism(_) => "determinism",
            SfcError::Metric(_) => "metric",
            SfcError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, SfcError>;
