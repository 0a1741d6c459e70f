use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("incompatible plugin modules: {0}")]
    Incompatible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("nothing to merge")]
    NothingToMerge,

    #[error("main branch is locked by another merge ({}); retry once it finishes", .0.display())]
    Locked(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ForgeError {
    /// Validation and integrity failures are reported separately from runtime
    /// failures by the command line front end.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ForgeError::Validation(_)
                | ForgeError::Input(_)
                | ForgeError::Integrity(_)
                | ForgeError::Format(_)
                | ForgeError::Incompatible(_)
                | ForgeError::Conflict(_)
                | ForgeError::Range(_)
                | ForgeError::Parameter(_)
        )
    }
}
