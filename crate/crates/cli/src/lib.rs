//! Command-line front end for the estimation core: configuration files,
//! scenario execution, artifact emission and reporting.

pub mod config;
pub mod output;
pub mod report;
pub mod run;

use thiserror::Error;

/// Failure classes of a CLI invocation, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable, unparsable or inconsistent configuration (exit 2).
    #[error("{0}")]
    Config(String),

    /// The pipeline failed while simulating or estimating (exit 3).
    #[error("{0}")]
    Estimation(String),

    /// The static estimator was the only one requested and the measurement
    /// set cannot determine the state (exit 4).
    #[error("static estimation is unobservable: {0}")]
    SseUnobservable(String),

    /// Artifacts could not be written or read (exit 1).
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Estimation(_) => 3,
            CliError::SseUnobservable(_) => 4,
        }
    }
}
