//! Experiment orchestration: configuration, data loading, training runs,
//! sweep protocols and metrics emission.
//!
//! A run directory contains `config.toml` (the resolved configuration),
//! `metrics.jsonl`, `epochs.csv`, one summary CSV named after the experiment
//! and the final checkpoints below `checkpoints/`.

mod config;
mod metrics;
mod run;

use thiserror::Error;

pub use config::{
    DataConfig, DecalibGroup, Experiment, Preset, RunConfig, SpeechSource, SweepConfig, Task, DATA_ROOT_ENV,
    SCHEMA_VERSION,
};
pub use metrics::{summary_columns, DecalibRow, EPOCH_COLUMNS, EpochRecord, EvalRow, LatencyRow, SilenceRow, SparsityRow, SummaryRows, TrainRow};
pub use run::{load_data, run, train_model, RunOutcome, TaskData, TrainedModel, Variant};

use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data missing: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Numerical(_) => 4,
            HarnessError::Io(_) | HarnessError::Runtime(_) => 1,
        }
    }

    /// Short label written into the `status` column of failed sweep rows.
    pub fn class(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Data(_) => "data",
            HarnessError::Numerical(_) => "numerical",
            HarnessError::Io(_) => "io",
            HarnessError::Runtime(_) => "runtime",
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            HarnessError::Numerical(e.to_string())
        } else if let TrainError::Config(m) = e {
            HarnessError::Config(m)
        } else {
            HarnessError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}
