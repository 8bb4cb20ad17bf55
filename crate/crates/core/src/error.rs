use std::path::PathBuf;

use road_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RoadError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("dataset validation failed: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no region received activations from both domains")]
    DegenerateStep,
    #[error("non-finite loss at iteration {iteration}; diagnostics in {snapshot}")]
    NonFinite { iteration: usize, snapshot: PathBuf },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, RoadError>;

impl RoadError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RoadError::Io { path: path.into(), source }
    }

    /// Usage and configuration problems, as opposed to runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, RoadError::Config(_))
    }
}
