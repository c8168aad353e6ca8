//! Configuration-driven experiment runner behind the `ries` binary.

pub mod config;
pub mod experiments;
pub mod report;

use ries_core::RiesError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] RiesError),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
    #[error("cannot write series: {0}")]
    Csv(#[from] csv::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl CliError {
    /// 2 for schema or input errors, 3 for capacity guards, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                RiesError::Capacity { .. } => 3,
                RiesError::Validation(_) | RiesError::Dimension(_) | RiesError::Range(_) | RiesError::Json(_) => 2,
                _ => 1,
            },
            CliError::Output(_) | CliError::Csv(_) | CliError::Pool(_) => 1,
        }
    }
}
