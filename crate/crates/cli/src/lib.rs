//! Experiment front-end for `vclab`: configuration, multi-trial runs,
//! result files, aggregation and charts.

pub mod aggregate;
pub mod chart;
pub mod config;
pub mod results;
pub mod runner;

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("results file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] vclab_core::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 1 configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Csv(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                vclab_core::Error::Numeric(_) => 3,
                vclab_core::Error::Io { .. } | vclab_core::Error::Format { .. } => 2,
                _ => 1,
            },
        }
    }
}
