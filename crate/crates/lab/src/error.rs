use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// The config failed to parse or validate.
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    /// A numerical stage failed.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: homogenize_core::Error,
    },

    /// An artifact produced by an earlier stage is absent.
    #[error("missing upstream artifact {}: run stage `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config { .. } => 2,
            LabError::Stage { .. } | LabError::Io { .. } => 3,
            LabError::MissingArtifact { .. } => 4,
        }
    }

    pub fn stage(stage: &'static str) -> impl FnOnce(homogenize_core::Error) -> LabError {
        move |source| LabError::Stage { stage, source }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> LabError {
        let context = context.into();
        move |source| LabError::Io { context, source }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
