use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DispatchError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DispatchError {
    /// A parameter is outside its domain (negative peak, efficiency > 1, ...).
    #[error("invalid parameter `{name}`: {reason}")]
    Domain { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("dataset has {available} episodes, {requested} requested")]
    Size { requested: usize, available: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("integration diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("episode finished: step {step} is beyond the {n_steps}-step horizon")]
    EpisodeFinished { step: usize, n_steps: usize },

    #[error("episode sets do not align: {0}")]
    Alignment(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DispatchError {
    pub(crate) fn domain(name: &'static str, reason: impl Into<String>) -> Self {
        DispatchError::Domain {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DispatchError::Io {
            path: path.into(),
            source,
        }
    }
}
