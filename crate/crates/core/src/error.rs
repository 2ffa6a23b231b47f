use thiserror::Error;

use crate::tape::TapeError;

/// Errors raised by models, estimators, baselines and oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<usize> },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("outcome {outcome} out of range for support of size {size}")]
    OutcomeOutOfRange { outcome: usize, size: usize },
    #[error("model is missing the `{0}` partial callback")]
    MissingPartial(&'static str),
    #[error("deterministic adjoint requested for a model with score steps")]
    ScoreStepsPresent,
    #[error("finite support too large: {paths} paths exceed the cap of {cap}")]
    SupportTooLarge { paths: usize, cap: usize },
    #[error("model has no finite support at step {0}")]
    NotEnumerable(usize),
    #[error("need at least {min} samples, got {got}")]
    InsufficientSamples { got: usize, min: usize },
    #[error("return mode `{0}` requires value estimates")]
    MissingValues(&'static str),
    #[error("return computation requires a summable loss")]
    NotSummable,
    #[error("baseline kind mismatch: expected {expected}, found {found}")]
    BaselineKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>, step: Option<usize>) -> Self {
        Error::NonFinite {
            what: what.into(),
            step,
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
