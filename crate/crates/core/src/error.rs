use thiserror::Error;

/// Errors raised anywhere in the learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state {point:?} lies outside the model domain box")]
    Domain { point: Vec<f64> },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampler method {method} is not compatible with model {model}")]
    MethodMismatch { method: String, model: String },

    #[error("trajectory left the safety box at step {step}")]
    Divergence { step: usize },

    #[error("{matrix} is not positive definite (min eigenvalue estimate {min_eigenvalue:e})")]
    Factorization { matrix: &'static str, min_eigenvalue: f64 },

    #[error("eigendecomposition of {0} did not converge")]
    EigenSolver(&'static str),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("degenerate mode {mode}: energy norm {norm:e} below threshold")]
    DegenerateMode { mode: usize, norm: f64 },

    #[error("grid resolution {0} is below the minimum of 100 points")]
    Resolution(usize),

    #[error("grid with {0} cells exceeds the memory guard of 1e6")]
    MemoryGuard(usize),

    #[error("all-zero vector cannot be normalized")]
    ZeroVector,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Name of the pipeline stage an error belongs to, used in CLI reports.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Domain { .. } | Error::Unsupported(_) => "sde_models",
            Error::MethodMismatch { .. } | Error::Divergence { .. } => "sampling",
            Error::Factorization { .. } => "gram",
            Error::EigenSolver(_) | Error::DegenerateSpectrum(_) => "estimator",
            Error::DegenerateMode { .. } | Error::ZeroVector => "diagnostics",
            Error::Resolution(_) | Error::MemoryGuard(_) => "oracle",
            Error::Config { .. } => "cli",
            Error::InvalidArgument(_) => "input",
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
