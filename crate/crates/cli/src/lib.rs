//! Experiment runner and report generator for the continual retrieval
//! library: config parsing, sequence runs, reports, gradient checks and
//! property self-tests.

use std::path::Path;

use diffmath::DiffError;

pub mod config;
pub mod report;
pub mod run;
pub mod selftest;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<ptat::Error> for CliError {
    fn from(e: ptat::Error) -> Self {
        use ptat::Error as E;
        let msg = e.to_string();
        match e {
            E::NonFiniteLoss { .. } | E::LossComponent { .. } | E::Diverged { .. } => CliError::Numeric(msg),
            E::Math(DiffError::NonFinite { .. }) => CliError::Numeric(msg),
            E::Config(_)
            | E::UnknownStrategy { .. }
            | E::RepeatedInjection(_)
            | E::SequenceOverflow { .. }
            | E::DegenerateMap(_)
            | E::TooFewPairs(_)
            | E::TeacherMismatch => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}
