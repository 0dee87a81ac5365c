//! Experiment plumbing: JSON configs, CSV writers and the runner behind the
//! `dlj` binary.

pub mod config;
pub mod csv;
pub mod run;

pub use config::{parse_config, serialize_config, ConfigError, ExperimentConfig, ExperimentKind};
pub use run::{run_experiment, write_outputs, ExperimentReport, Summary};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("runtime failure: {0}")]
    Runtime(#[from] crate::error::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("nothing to write: {0}")]
    EmptyData(&'static str),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl ExperimentError {
    /// `1` for configuration problems, `2` for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            _ => 2,
        }
    }
}
