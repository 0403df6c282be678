use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolkitError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged in {stage} at step {step}")]
    Divergence { stage: &'static str, step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(cmaae_core::Error),
}

impl ToolkitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ToolkitError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration, 3 for data, 4 for divergence,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ToolkitError::Config(_) => 2,
            ToolkitError::Data(_) => 3,
            ToolkitError::Divergence { .. } => 4,
            ToolkitError::Io { .. } | ToolkitError::Core(_) => 1,
        }
    }
}

impl From<cmaae_core::Error> for ToolkitError {
    fn from(e: cmaae_core::Error) -> Self {
        use cmaae_core::Error as E;
        match e {
            E::Config(m) | E::Validation(m) => ToolkitError::Config(m),
            E::Data(m) | E::Size(m) => ToolkitError::Data(m),
            e @ E::ResizeRequired { .. } => ToolkitError::Data(e.to_string()),
            E::Divergence { stage, step } => ToolkitError::Divergence { stage, step },
            other => ToolkitError::Core(other),
        }
    }
}

pub type Result<T, E = ToolkitError> = std::result::Result<T, E>;
