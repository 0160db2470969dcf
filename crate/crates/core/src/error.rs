use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(
        "covariance is singular or not positive definite (smallest eigenvalue {min_eigenvalue:e})"
    )]
    SingularCovariance { min_eigenvalue: f64 },
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("measurement model is singular: {0}")]
    SingularMeasurement(String),
    #[error("filter diverged at step {step}: {reason}")]
    DivergedFilter { step: usize, reason: String },
    #[error("need at least {required} runs, got {got}")]
    InsufficientRuns { required: usize, got: usize },
    #[error("invalid window size {window} for a series of length {len}")]
    InvalidWindow { window: usize, len: usize },
    #[error("degenerate alignment geometry: {0}")]
    DegenerateAlignment(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("optimizer stalled at iteration {iteration} (objective {objective:e})")]
    OptimizerStalled { iteration: usize, objective: f64 },
    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },
    #[error("percent decrease is undefined when the baseline equals the ground truth ({0})")]
    UndefinedBaseline(f64),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the numerics (as opposed to bad input or IO).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularCovariance { .. }
                | Error::SingularInnovation
                | Error::SingularMeasurement(_)
                | Error::DivergedFilter { .. }
                | Error::DegenerateFit(_)
                | Error::OptimizerStalled { .. }
                | Error::TrainingDiverged { .. }
                | Error::UndefinedBaseline(_)
                | Error::DegenerateAlignment(_)
        )
    }
}
