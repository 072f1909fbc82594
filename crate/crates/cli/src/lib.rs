//! Experiment runner behind the `chargenoise` binary.
//!
//! Each subcommand is a function in [`commands`] that reads an
//! [`config::ExperimentConfig`], runs one of the drivers in
//! [`experiments`] and writes columnar artifacts plus a manifest.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod manifest;

use chargenoise::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_QUALITY: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn quality(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_QUALITY,
            message: message.into(),
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
        let code = match &e {
            Error::DegenerateGeometry(_) | Error::InvalidParameter(_) => EXIT_USAGE,
            Error::TimeOutOfRange { .. }
            | Error::InsufficientData(_)
            | Error::GridMismatch(_)
            | Error::FingerprintMismatch { .. }
            | Error::Parse { .. }
            | Error::Io(_) => EXIT_DATA,
            Error::FitFailed(_) | Error::BelowSensitivity { .. } | Error::Extrapolation { .. } => EXIT_QUALITY,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
