use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot parse config {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(#[from] eos_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialisation failed: {0}")]
    Serialise(#[from] serde_json::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl LabError {
    /// 2 for bad configuration, 3 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::ConfigFile { .. } => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;
