//! Metric records and their CSV / JSON-lines writers.
//!
//! Column names are part of the output contract. Failed sweep points keep
//! their row: value columns are empty and `status` holds the error class.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{Experiment, HarnessError};

pub const STATUS_OK: &str = "ok";

/// `epochs.csv`: one row per (run, seed, epoch).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub run: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_hidden_spikes: f64,
    pub eta_t: f64,
}

pub const EPOCH_COLUMNS: &[&str] =
    &["run", "seed", "epoch", "train_loss", "train_acc", "test_acc", "mean_hidden_spikes", "eta_t"];

/// Column names of each experiment's summary CSV.
pub fn summary_columns(experiment: Experiment) -> &'static [&'static str] {
    match experiment {
        Experiment::Train => &["seed", "train_acc", "test_acc", "mean_spikes", "status"],
        Experiment::Eval => &["seed", "test_acc", "mean_spikes", "status"],
        Experiment::LatencySweep => &["seed", "t_limit", "test_acc", "status"],
        Experiment::DecalibSweep => &["group", "sigma_d", "seed", "test_acc", "train_acc", "mean_spikes", "status"],
        Experiment::SparsitySweep => &["rho_b", "seed", "test_acc", "mean_spikes", "status"],
        Experiment::SilenceAblation => &["dropout_p", "fraction", "seed", "test_acc", "mean_spikes", "status"],
    }
}

/// `train.csv`
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRow {
    pub seed: u64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub mean_spikes: Option<f64>,
    pub status: String,
}

/// `eval.csv`
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub mean_spikes: Option<f64>,
    pub status: String,
}

/// `latency_sweep.csv`
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub seed: u64,
    pub t_limit: f64,
    pub test_acc: Option<f64>,
    pub status: String,
}

/// `decalib_sweep.csv`
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecalibRow {
    pub group: String,
    pub sigma_d: f64,
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub train_acc: Option<f64>,
    pub mean_spikes: Option<f64>,
    pub status: String,
}

/// `sparsity_sweep.csv`
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityRow {
    pub rho_b: f64,
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub mean_spikes: Option<f64>,
    pub status: String,
}

/// `silence_ablation.csv`
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SilenceRow {
    pub dropout_p: f64,
    pub fraction: f64,
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub mean_spikes: Option<f64>,
    pub status: String,
}

/// Summary rows of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum SummaryRows {
    Train(Vec<TrainRow>),
    Eval(Vec<EvalRow>),
    Latency(Vec<LatencyRow>),
    Decalib(Vec<DecalibRow>),
    Sparsity(Vec<SparsityRow>),
    Silence(Vec<SilenceRow>),
}

pub(crate) fn status(err: Option<&HarnessError>) -> String {
    err.map_or_else(|| STATUS_OK.to_string(), |e| e.class().to_string())
}

/// Append-only writers of one run directory.
pub(crate) struct MetricsSink {
    jsonl: BufWriter<File>,
    epochs: csv::Writer<File>,
    summary: csv::Writer<File>,
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Io(e.to_string())
}

impl MetricsSink {
    /// Creates the files and writes both CSV headers, so that column names
    /// are present even when no row follows.
    pub fn create(dir: &Path, summary_name: &str, summary_header: &[&str]) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| csv::WriterBuilder::new().has_headers(false).from_path(dir.join(name)).map_err(csv_err);
        let mut epochs = open("epochs.csv")?;
        epochs.write_record(EPOCH_COLUMNS).map_err(csv_err)?;
        let mut summary = open(&format!("{summary_name}.csv"))?;
        summary.write_record(summary_header).map_err(csv_err)?;
        Ok(Self { jsonl: BufWriter::new(File::create(dir.join("metrics.jsonl"))?), epochs, summary })
    }

    fn json_line<T: Serialize>(&mut self, kind: &str, value: &T, error: Option<&HarnessError>) -> Result<(), HarnessError> {
        let mut v = serde_json::to_value(value).map_err(|e| HarnessError::Io(e.to_string()))?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("record".into(), kind.into());
            if let Some(e) = error {
                map.insert("error".into(), e.to_string().into());
            }
        }
        serde_json::to_writer(&mut self.jsonl, &v).map_err(|e| HarnessError::Io(e.to_string()))?;
        self.jsonl.write_all(b"\n")?;
        Ok(())
    }

    pub fn epoch(&mut self, rec: &EpochRecord) -> Result<(), HarnessError> {
        self.json_line("epoch", rec, None)?;
        self.epochs.serialize(rec).map_err(csv_err)
    }

    pub fn row<T: Serialize>(&mut self, kind: &str, row: &T, error: Option<&HarnessError>) -> Result<(), HarnessError> {
        self.json_line(kind, row, error)?;
        self.summary.serialize(row).map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        self.jsonl.flush()?;
        self.epochs.flush()?;
        self.summary.flush()?;
        Ok(())
    }
}
