//! Error classification for the command-line surface.
//!
//! Every failure is folded into one of three categories so the process can
//! exit with a distinct code per category: configuration problems (bad TOML,
//! invalid values, CLI misuse), data problems (missing or corrupt files,
//! protocol violations), and numeric aborts (non-finite loss).

use std::fmt;

use rvseg_core::net::NetError;
use rvseg_core::projection::ProjectionError;
use rvseg_core::weather::WeatherError;

/// Process exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code for data errors.
pub const EXIT_DATA: i32 = 3;
/// Process exit code for numeric aborts.
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numeric abort: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn config(err: impl fmt::Display) -> Self {
        CliError::Config(err.to_string())
    }

    pub fn data(err: impl fmt::Display) -> Self {
        CliError::Data(err.to_string())
    }
}

/// IO failures are data errors; the path makes the message actionable.
pub fn io_err(path: &std::path::Path, err: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {err}", path.display()))
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            NetError::BadConfig { .. }
            | NetError::BadInputSize { .. }
            | NetError::ToggleWithoutParams { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<WeatherError> for CliError {
    fn from(e: WeatherError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ProjectionError> for CliError {
    fn from(e: ProjectionError) -> Self {
        match e {
            ProjectionError::LabelCountMismatch { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
