//! Command implementations behind the `evllm` binary.

pub mod commands;
pub mod config;
pub mod svg;

use std::fmt;

pub use commands::{run, Cli};
pub use config::RunConfig;

/// Process exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Bad flags, bad config, or a checkpoint that does not match the config.
pub const EXIT_USAGE: i32 = 1;
/// Unreadable, malformed or inconsistent input data.
pub const EXIT_DATA: i32 = 2;
/// Non-finite values or a diverged optimization.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Lib(evllm::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Lib(e) if e.is_numeric_error() => EXIT_NUMERIC,
            CliError::Lib(evllm::Error::Config(_)) => EXIT_USAGE,
            CliError::Lib(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            CliError::Usage(m) | CliError::Data(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        };
        // Diagnostics are always a single line.
        f.write_str(&text.replace('\n', "; "))
    }
}

impl std::error::Error for CliError {}

impl From<evllm::Error> for CliError {
    fn from(e: evllm::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}
