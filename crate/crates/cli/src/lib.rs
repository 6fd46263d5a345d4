//! Library side of the `lyapctl` binary: experiment files, run
//! orchestration and the CSV/JSON artefacts.

pub mod config;
pub mod output;
pub mod run;

use lyapctl::agents::AgentError;
use lyapctl::dynamics::DynamicsError;
use lyapctl::metrics::MetricsError;
use thiserror::Error;

pub use config::{EnvOverrides, ExperimentConfig, ExperimentSection};
pub use output::{Checkpoint, CurveRow, MetricRow, Normalization, RecordRow, RunSummary, TableRow};
pub use run::{evaluate_checkpoint, run_id, run_sweep, run_training, train_command, RunOutput, SweepOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_PARTIAL_SWEEP: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{failed} of {total} sweep runs failed")]
    PartialSweep { failed: usize, total: usize },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Agent(AgentError::Divergence { .. }) => EXIT_DIVERGENCE,
            CliError::PartialSweep { .. } => EXIT_PARTIAL_SWEEP,
            _ => EXIT_CONFIG,
        }
    }
}
