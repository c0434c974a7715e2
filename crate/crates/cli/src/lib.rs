//! Experiment runner for `zostack`: reads a JSON experiment description, runs
//! seeded replicates (optionally over a sweep grid) in a worker pool, and writes
//! per-run trace CSVs, an aggregate table and a hashed manifest.

pub mod config;
pub mod experiment;
pub mod output;

pub use config::ExperimentConfig;
pub use experiment::{diagnose, report, run_experiment, Mode, Outcome, RunSummary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{failed} of {total} runs aborted; see the failure manifest")]
    RunAbort { failed: usize, total: usize },
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) | CliError::RunAbort { .. } => 3,
            CliError::Diagnostic(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(format!("i/o error: {e}"))
    }
}
