//! Experiment runner for tirlab: configuration, the pretrain → trials →
//! analysis pipeline, run manifests and manifest comparison.

pub mod analyze;
pub mod compare;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::{ExperimentConfig, OUTPUT_ROOT_ENV};
pub use manifest::{RunManifest, RunStatus};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),
    /// A pipeline stage failed after validation passed.
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }

    pub fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        CliError::Stage { stage: stage.into(), message: e.to_string() }
    }
}
