//! Pipeline driver: each stage reads the artifacts of the previous ones from
//! the work directory and leaves its own behind with a `stage.json` record.

pub mod config;
pub mod stages;

use std::path::Path;

use thiserror::Error;

pub use config::PipelineConfig;
pub use stages::{Comparison, FeedbackSource, Pipeline, StageRecord, ARTIFACT_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("missing stage `{stage}` in {dir}; run it first")]
    MissingStage { stage: String, dir: String },
    #[error("input data: {0}")]
    Data(String),
    #[error("{0}")]
    Stage(String),
    #[error("feedback service: {0}")]
    Service(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }

    pub fn stage(e: impl std::fmt::Display) -> Self {
        CliError::Stage(e.to_string())
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Stage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::MissingStage { .. } => 4,
            CliError::Data(_) => 5,
            CliError::Service(_) => 6,
        }
    }
}
