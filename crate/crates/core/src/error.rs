use thiserror::Error;

/// Pipeline stage an error originated in. Used by the CLI to name the
/// failing step in its one-line diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Integration,
    Smoothing,
    Preliminary,
    OneStep,
    Inference,
    Nls,
    Study,
    Input,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Integration => "integration",
            Stage::Smoothing => "smoothing",
            Stage::Preliminary => "preliminary estimation",
            Stage::OneStep => "one-step update",
            Stage::Inference => "inference",
            Stage::Nls => "nonlinear least squares",
            Stage::Study => "monte carlo study",
            Stage::Input => "input validation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("step size underflow at t = {t:e} (stiff or blowing-up system)")]
    StepSizeUnderflow { t: f64 },
    #[error("integration exceeded {max_steps} steps before t = {t:e}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("state became non-finite at t = {t:e}")]
    NonFiniteState { t: f64 },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular local design at t = {t:e} (bandwidth {bandwidth:e} too small)")]
    SingularLocalDesign { t: f64, bandwidth: f64 },
    #[error("singular normal matrix in {0}")]
    SingularNormalMatrix(&'static str),
    #[error("optimizer did not converge: {0}")]
    OptimizerDiverged(String),
    #[error("singular Jacobian of the estimating function (scaled condition {condition:e})")]
    SingularJacobian { condition: f64 },
    #[error("one-step update produced non-finite components")]
    NonFiniteUpdate,
    #[error("every bandwidth failed; last error: {last}")]
    AllBandwidthsFailed { last: Box<Error> },
    #[error("singular Fisher information (scaled condition {condition:e})")]
    SingularFisher { condition: f64 },
    #[error("Levenberg-Marquardt hit the iteration limit ({iterations})")]
    MaxIterationsExceeded { iterations: usize },
    #[error("study aborted: {failed} of {total} replications failed")]
    StudyAborted { failed: usize, total: usize },
}

impl Error {
    pub fn stage(&self) -> Stage {
        match self {
            Error::StepSizeUnderflow { .. } | Error::TooManySteps { .. } | Error::NonFiniteState { .. } => {
                Stage::Integration
            }
            Error::UnknownModel(_) | Error::DimensionMismatch(_) | Error::InvalidArgument(_) => Stage::Input,
            Error::SingularLocalDesign { .. } => Stage::Smoothing,
            Error::SingularNormalMatrix(_) | Error::OptimizerDiverged(_) => Stage::Preliminary,
            Error::SingularJacobian { .. } | Error::NonFiniteUpdate => Stage::OneStep,
            Error::AllBandwidthsFailed { last } => last.stage(),
            Error::SingularFisher { .. } => Stage::Inference,
            Error::MaxIterationsExceeded { .. } => Stage::Nls,
            Error::StudyAborted { .. } => Stage::Study,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
