use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where in an ensemble a numerical failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Location {
    pub sample: Option<usize>,
    pub step: Option<usize>,
}

impl Location {
    pub fn at(sample: usize, step: usize) -> Self {
        Self {
            sample: Some(sample),
            step: Some(step),
        }
    }

    pub fn step(step: usize) -> Self {
        Self {
            sample: None,
            step: Some(step),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.sample, self.step) {
            (Some(i), Some(k)) => write!(f, " (sample {i}, step {k})"),
            (None, Some(k)) => write!(f, " (step {k})"),
            (Some(i), None) => write!(f, " (sample {i})"),
            (None, None) => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid problem field `{field}`: {reason}")]
    InvalidProblem { field: String, reason: String },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("non-finite value in {what}{location}")]
    NonFinite {
        what: &'static str,
        location: Location,
    },

    #[error("state norm {norm:.3e} exceeds divergence bound{location}")]
    Diverged { norm: f64, location: Location },

    #[error("{what} is singular{location}")]
    Singular {
        what: &'static str,
        location: Location,
    },

    #[error("{what} is not positive semi-definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { what: String, min_eigenvalue: f64 },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        source: Box<Error>,
    },

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl fmt::Display,
        found: impl fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn problem(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidProblem {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidGrid(_)
            | Error::InvalidProblem { .. }
            | Error::InvalidConfig { .. }
            | Error::Json(_)
            | Error::TooFewSamples { .. } => true,
            Error::NotPsd { .. } => true,
            Error::Iteration { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
