use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    /// `m·d_λ ≥ n`: the shrinkage coefficient is undefined.
    #[error(
        "effective dimension exceeds local sample budget: d_lambda = {d_lambda} with {samples} samples{}",
        agent.map(|a| format!(" (agent {a})")).unwrap_or_default()
    )]
    BudgetExceeded {
        d_lambda: f64,
        samples: usize,
        agent: Option<usize>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("reference optimizer did not converge: gradient norm {grad_norm:e} after {iterations} iterations")]
    NonConvergence { grad_norm: f64, iterations: usize },

    #[error("PCG breakdown: non-positive curvature {curvature:e} at iteration {iteration}")]
    PcgBreakdown { curvature: f64, iteration: usize },

    #[error("zero reference matrix")]
    ZeroReference,

    #[error("one-hot encoding needs at least two classes, found {0}")]
    SingleClass(usize),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Failures that a comparison run records as "skipped" instead of
    /// aborting: budget violations and numerically singular local systems.
    pub fn is_skippable(&self) -> bool {
        matches!(
            self,
            Error::BudgetExceeded { .. }
                | Error::NotPositiveDefinite
                | Error::NonFinite(_)
                | Error::PcgBreakdown { .. }
        )
    }
}
