use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("missing artifact `{}` ({what})", .path.display())]
    MissingArtifact { path: PathBuf, what: String },
    #[error(transparent)]
    Core(#[from] squisher_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(#[from] csv::Error),
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(vec![msg.into()])
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;
