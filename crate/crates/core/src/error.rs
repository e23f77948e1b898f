use thiserror::Error;

/// Errors raised by the hierarchy, modelling and reconciliation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid aggregation scheme: {0}")]
    InvalidScheme(String),

    #[error("aggregation level {k} is not part of the scheme")]
    InvalidLevel { k: usize },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("incomplete period {period} at level {k}: need {needed} values, got {got}")]
    IncompletePeriod { k: usize, period: usize, needed: usize, got: usize },

    #[error("new-data step z={z} out of range for m={m}")]
    OutOfRange { z: usize, m: usize },

    #[error("missing observed data: need {needed} bottom observations, got {got}")]
    MissingData { needed: usize, got: usize },

    #[error("scheme {0:?} is not a nested tree; use the bottom-level reduction")]
    UnsupportedTree(Vec<usize>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("series too short for ARMA({p},{q}): need {needed}, got {got}")]
    SeriesTooShort { p: usize, q: usize, needed: usize, got: usize },

    #[error("ARMA({p},{q}) fit failed: {reason}")]
    FitFailure { p: usize, q: usize, reason: String },

    #[error("order selection failed: no candidate model could be fitted")]
    SelectionFailure,

    #[error("empty history for a model with p+q > 0")]
    EmptyHistory,

    #[error("level histories are inconsistent: {0}")]
    Consistency(String),

    #[error("singular covariance: min eigenvalue {min_eigenvalue:e}, max eigenvalue {max_eigenvalue:e}")]
    SingularCovariance { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("unbiasedness constraint SGS = S violated (max deviation {0:e})")]
    ConstraintViolated(f64),

    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{step} failed: {source}")]
    Step {
        step: UpdateStep,
        #[source]
        source: Box<Error>,
    },
}

/// Stage of the forecast update pipeline an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStep {
    UpdateBase,
    Reduce,
    Reconcile,
    Restore,
}

impl std::fmt::Display for UpdateStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateStep::UpdateBase => "base forecast update",
            UpdateStep::Reduce => "pruning and reduction",
            UpdateStep::Reconcile => "reconciliation",
            UpdateStep::Restore => "restoring observed values",
        })
    }
}

impl Error {
    /// True for failures of the linear algebra rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularCovariance { .. } | Error::ConstraintViolated(_) | Error::FitFailure { .. } => true,
            Error::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// The underlying error with any step attribution removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn in_step(step: UpdateStep) -> impl FnOnce(Error) -> Error {
        move |source| Error::Step { step, source: Box::new(source) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
