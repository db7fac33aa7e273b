use std::io;

/// Errors produced anywhere in the engine.
///
/// The CLI maps these onto process exit codes, so new variants should be
/// placed in the matching group of [`Error::exit_class`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("grid too small: {0}")]
    TooSmall(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error("numerical failure after {iterations} iterations: {reason}")]
    Numerical { iterations: usize, reason: String },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("parse error in {field}: {reason}")]
    Parse { field: String, reason: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported {field}: {value}")]
    Unsupported { field: String, value: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse classification used for process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Usage,
    Data,
    Divergence,
}

impl Error {
    pub fn exit_class(&self) -> ExitClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ExitClass::Usage,
            Error::Divergence { .. } | Error::Numerical { .. } => ExitClass::Divergence,
            _ => ExitClass::Data,
        }
    }

    pub(crate) fn parse(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
