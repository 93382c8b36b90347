use storage_dispatch::DispatchError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A configuration value is missing, malformed or out of its domain.
    #[error("config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{0}")]
    Usage(String),

    /// An input another command should have produced does not exist.
    #[error("{0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Core(#[from] DispatchError),
}

impl CliError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 usage or config, 3 infeasible, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::MissingArtifact(_) => 4,
            CliError::Core(e) => match e {
                DispatchError::Infeasible(_) | DispatchError::Divergence { .. } => 3,
                DispatchError::Io { .. } | DispatchError::Parse { .. } => 4,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
