use equibody::bodymodel::BodyError;
use equibody::equinet::EquinetError;
use equibody::trainer::TrainError;
use thiserror::Error;

/// Every failure maps to one process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0} propert{suffix} failed", suffix = if *.0 == 1 { "y" } else { "ies" })]
    PropertyFailed(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::PropertyFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Checkpoint(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
            TrainError::HashMismatch | TrainError::Checkpoint(_) => CliError::Checkpoint(e.to_string()),
            TrainError::Io(_) => CliError::Io(e.to_string()),
            TrainError::Body(b) => b.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<BodyError> for CliError {
    fn from(e: BodyError) -> Self {
        match e {
            BodyError::Io(_) | BodyError::Malformed(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EquinetError> for CliError {
    fn from(e: EquinetError) -> Self {
        CliError::Config(e.to_string())
    }
}
