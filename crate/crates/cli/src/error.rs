use std::fmt;

use latent_router::domain::DomainError;
use latent_router::evaluation::EvalError;
use latent_router::network::{CheckpointError, NetworkError};
use latent_router::synthetic::GeneratorError;
use latent_router::tensor::TensorError;
use latent_router::training::TrainError;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags or inputs. Exit code 1.
    Validation(String),
    /// A required input file is absent. Exit code 2.
    Missing(String),
    /// Non-finite values or a failed gradient check. Exit code 3.
    Numeric(String),
    /// Anything else, such as unwritable output. Exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Failed(_) => 1,
            CliError::Missing(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Missing(m) => write!(f, "missing artifact: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(_) => CliError::Numeric(e.to_string()),
            TrainError::Io { .. } => CliError::Failed(e.to_string()),
            TrainError::Network(n) => n.into(),
            TrainError::Config(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Network(n) => n.into(),
            EvalError::Io { .. } => CliError::Failed(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Tensor(TensorError::NonFinite(_)) => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<DomainError> for CliError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::Io { .. } => CliError::Failed(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        match e {
            GeneratorError::Io { .. } => CliError::Failed(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Missing(e.to_string())
            }
            CheckpointError::Io { .. } => CliError::Failed(e.to_string()),
            CheckpointError::Network(n) => n.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
