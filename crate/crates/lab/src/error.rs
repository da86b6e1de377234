use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Bad or unreadable configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] tta_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 when training or
    /// adaptation diverged, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Config(_) | LabError::Core(tta_core::Error::Config(_)) => 2,
            LabError::Core(
                tta_core::Error::TrainingDivergence { .. }
                | tta_core::Error::AdaptationDivergence { .. },
            ) => 3,
            _ => 1,
        }
    }
}
