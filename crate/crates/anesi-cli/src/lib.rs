//! Command implementations behind the `anesi` binary, split out as a library
//! so integration tests and fuzz targets can reach the config schema and the
//! command logic without spawning a process.

pub mod commands;
pub mod config;

use anesi::pruners::Disagreement;
use anesi::train::TrainError;

/// Every command failure, tagged with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit 2: bad config file, bad flag value, missing checkpoint.
    #[error("{0}")]
    Config(String),
    /// Exit 3: training hit a non-finite loss or gradient.
    #[error("{0}")]
    NanAbort(String),
    /// Exit 4: the symbolic pruner disagreed with a brute-force oracle.
    #[error("pruner disagreement: {0}")]
    Pruner(Box<Disagreement>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NanAbort(_) => 3,
            CliError::Pruner(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(msg) => CliError::NanAbort(msg),
            TrainError::Mismatch(msg) => CliError::Config(msg),
            other => CliError::Other(other.to_string()),
        }
    }
}
