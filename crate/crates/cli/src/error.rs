use std::fmt;

use accel_ode::{Error, Stage};

/// A failure that ends the process. `Parse` covers unreadable or invalid
/// input (exit 2); `Estimation` covers numerical failures (exit 3).
#[derive(Debug)]
pub enum CliError {
    Parse { stage: String, message: String },
    Estimation { stage: Stage, message: String },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn parse(stage: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError::Parse { stage: stage.into(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::Estimation { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // always a single line
        let (stage, message) = match self {
            CliError::Parse { stage, message } => (stage.clone(), message),
            CliError::Estimation { stage, message } => (stage.to_string(), message),
        };
        write!(f, "{stage} failed: {}", message.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e.stage() {
            Stage::Input => CliError::Parse { stage: Stage::Input.to_string(), message: e.to_string() },
            stage => CliError::Estimation { stage, message: e.to_string() },
        }
    }
}
