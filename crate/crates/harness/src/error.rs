use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] conprediff_core::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        use conprediff_core::Error as E;
        match self {
            Self::Verification(_) => 1,
            Self::Config(_) => 3,
            Self::Io { .. } | Self::Image { .. } | Self::Dataset(_) | Self::Checkpoint(_) => 4,
            Self::Core(E::Numeric(_) | E::Divergence { .. } | E::SamplerInvariant(_)) => 5,
            Self::Core(_) => 3,
        }
    }
}
