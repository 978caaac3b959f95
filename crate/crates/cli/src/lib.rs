//! Command implementations behind the `atlasflow` binary, plus the
//! evaluation experiments they expose.

pub mod commands;
pub mod config;
pub mod experiments;

use atlasflow_core::Error;

/// An error carrying the process exit code it should produce.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        CliError::new(1, message)
    }

    /// Errors raised while reading a checkpoint.
    pub fn checkpoint(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::Version { .. } => CliError::new(5, format!("corrupt checkpoint: {e}")),
            other => other.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DegenerateLens(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::other(e.to_string())
    }
}
