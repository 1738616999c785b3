use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedMixError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedMixError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("covariance for site {site} is invalid: {reason}")]
    InvalidCovariance { site: usize, reason: String },

    /// A class collected (almost) no responsibility mass, so its weighted
    /// precision matrix cannot be inverted.
    #[error("class {class} degenerated at iteration {iteration} (responsibility mass {mass:e})")]
    DegenerateClass {
        class: usize,
        mass: f64,
        iteration: usize,
    },

    #[error("surrogate quadratic is not negative definite for class {class}")]
    DegenerateTilt { class: usize },

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("round {round} is incomplete: {reason}")]
    IncompleteRound { round: u64, reason: String },

    #[error("federation failure in round {round}: {source}")]
    Federation {
        round: u64,
        #[source]
        source: Box<FedMixError>,
    },

    #[error("site {site} failed: {reason}")]
    SiteFailure { site: usize, reason: String },

    #[error("malformed message: {0}")]
    Decode(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FedMixError {
    pub fn contract(msg: impl Into<String>) -> Self {
        FedMixError::Contract(msg.into())
    }

    /// Stamps a degenerate-class error with the iteration it occurred at.
    pub(crate) fn at_iteration(self, at: usize) -> Self {
        match self {
            FedMixError::DegenerateClass { class, mass, .. } => FedMixError::DegenerateClass {
                class,
                mass,
                iteration: at,
            },
            other => other,
        }
    }

    /// Short machine-readable tag used by the CLI error summary.
    pub fn kind(&self) -> &'static str {
        match self {
            FedMixError::Contract(_) => "contract",
            FedMixError::DimensionMismatch { .. } => "dimension_mismatch",
            FedMixError::InvalidCovariance { .. } => "invalid_covariance",
            FedMixError::DegenerateClass { .. } => "degenerate_class",
            FedMixError::DegenerateTilt { .. } => "degenerate_tilt",
            FedMixError::NumericalOverflow(_) => "numerical_overflow",
            FedMixError::IncompleteRound { .. } => "incomplete_round",
            FedMixError::Federation { .. } => "federation",
            FedMixError::SiteFailure { .. } => "site_failure",
            FedMixError::Decode(_) => "decode",
            FedMixError::Unsupported(_) => "unsupported",
            FedMixError::Parse { .. } => "parse",
            FedMixError::Io { .. } => "io",
            FedMixError::Json(_) => "json",
        }
    }
}
