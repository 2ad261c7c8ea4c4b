//! Operational shell around `tvpinn-core`: configuration, ingestion,
//! result bundles and the `fit`, `simulate` and `verify` commands.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod verify;

use std::fmt;

use tvpinn_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CSV: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_ABORTED: i32 = 4;

/// A failure with the process exit code that reports its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(
            EXIT_CONFIG,
            format!("invalid configuration at `{}`: {}", field.into(), message.into()),
        )
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Csv { .. } => EXIT_CSV,
            Error::Config { .. } => EXIT_CONFIG,
            Error::AbortedRun { .. } | Error::Ensemble(_) => EXIT_ABORTED,
            _ => EXIT_OTHER,
        };
        Self::new(code, e.to_string())
    }
}
