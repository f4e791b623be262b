//! Process-level error classification.
//!
//! Every failure maps to one of three exit codes: 1 for configuration
//! problems (the message names the offending field), 2 for numeric
//! failures inside a stage, and 3 for missing input artifacts (the
//! message names the absent file and the stage that produces it).

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, invalid field value, or a locked output
    /// directory. Exit code 1.
    Config(String),
    /// A stage computation failed (non-finite values, corrupt artifact
    /// bytes, I/O trouble mid-stage). Exit code 2.
    Numeric(String),
    /// A required input artifact does not exist. Exit code 3.
    Missing(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Missing(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Missing(m) => write!(f, "missing input artifact: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ltlab_core::Error> for CliError {
    fn from(e: ltlab_core::Error) -> Self {
        match &e {
            // Invalid parameter combinations surface from the core as
            // domain/capacity violations; they trace back to the config.
            ltlab_core::Error::Domain(_) | ltlab_core::Error::Capacity(_) => {
                CliError::Config(e.to_string())
            }
            ltlab_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::Missing(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(e.to_string())
        } else {
            CliError::Numeric(format!("i/o: {e}"))
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
