//! Command-line orchestration: experiment config, artifact formats, and the
//! subcommand implementations behind the `neurovol` binary.

pub mod commands;
pub mod config;
pub mod pgm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// Process exit code: 1 for validation problems, 2 for I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}
