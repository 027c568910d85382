use std::fmt;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid network: {0}")]
    Validation(String),

    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("loss must be a scalar, found shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("solver: {0}")]
    Solver(SolverFailure),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Integrator failure modes.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverFailure {
    MaxNfe { limit: usize },
    StepUnderflow { t: f64, h: f64 },
    NonFiniteState { t: f64 },
    BadTimes,
}

impl fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverFailure::MaxNfe { limit } => write!(f, "exceeded max_nfe = {limit}"),
            SolverFailure::StepUnderflow { t, h } => write!(f, "step size underflow (h = {h:e} at t = {t})"),
            SolverFailure::NonFiniteState { t } => write!(f, "non-finite state at t = {t}"),
            SolverFailure::BadTimes => write!(f, "output times must be strictly increasing with at least one entry"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl fmt::Debug, found: impl fmt::Debug) -> Error {
    Error::Shape {
        op,
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}
