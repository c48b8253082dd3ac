//! Experiment runner behind the `flock` binary: configuration, strategy
//! runs, comparisons and trajectory CSV files.

pub mod config;
pub mod runner;
pub mod trajectory_csv;

pub use config::{ExperimentConfig, InitialData, RawConfig, SamplingTime, Strategy};
pub use runner::{compare, run, CompareRow, RunOutcome, Summary};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("numerical failure: {0}")]
    Numerical(flock_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<flock_core::Error> for CliError {
    fn from(e: flock_core::Error) -> Self {
        use flock_core::Error as E;
        match e {
            E::InvalidKernel(_) | E::NonIntegrableKernel(_) | E::DimensionMismatch(_) | E::InvalidArgument(_) => {
                CliError::Config(e.to_string())
            }
            E::Integration { .. } | E::SingularGramian { .. } | E::NotConverged { .. } => CliError::Numerical(e),
        }
    }
}
