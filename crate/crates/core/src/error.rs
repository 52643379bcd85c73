use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants split into caller mistakes (`Usage`, `NotFound`, `Domain`,
/// `Parse`) and runtime failures of the numerics. [`Error::is_usage`] draws
/// that line for the CLI exit-code contract.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("t = {t} lies outside the domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-finite evaluation at t = {t}, state = {state:?}: {what}")]
    Evaluation {
        t: f64,
        state: Vec<f64>,
        what: String,
    },

    #[error("solution blew up: last finite state at t = {last_time}")]
    BlowUp { last_time: f64, last_state: Vec<f64> },

    #[error("inner solve diverged after {iterations} iterations: {reason}")]
    Divergence {
        reason: String,
        iterations: usize,
        last_iterate: Vec<f64>,
    },

    #[error("matrix is singular or ill-conditioned (condition number {condition:e})")]
    Singular {
        condition: f64,
        matrix: Vec<Vec<f64>>,
    },

    #[error("sensitivity probe {probe} failed: {source}")]
    Sensitivity {
        probe: String,
        #[source]
        source: Box<Error>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Stable snake_case label of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::NotFound(_) => "not_found",
            Error::Domain { .. } => "domain",
            Error::Parse(_) => "parse",
            Error::Evaluation { .. } => "evaluation",
            Error::BlowUp { .. } => "blow_up",
            Error::Divergence { .. } => "divergence",
            Error::Singular { .. } => "singular",
            Error::Sensitivity { .. } => "sensitivity",
            Error::Precondition(_) => "precondition",
            Error::Unsupported(_) => "unsupported",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by bad input rather than failed numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Usage(_) | Error::NotFound(_) | Error::Domain { .. } | Error::Parse(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
