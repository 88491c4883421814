//! Harness around the core crates: run configuration, query synthesis,
//! training and evaluation drivers, turn-analysis reports and log verification.
//! The `tlgrpo` binary is a thin clap layer over [`commands`].

use tlgrpo_core::{BoError, EnvError, PolicyError, RlError, ScoreError};
use tlgrpo_simnet::SimnetError;

pub mod commands;
pub mod config;
pub mod data;
pub mod report;

pub use config::RunConfig;
pub use report::EvalReport;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("bad data file: {0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Simnet(#[from] SimnetError),
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}
