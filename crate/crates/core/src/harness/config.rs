//! Run configuration: a versioned TOML document layered over a preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::encoding::{LatencyCoderParams, SyntheticSpeechParams, SHD_KEPT, SMALL_SIDE};
use crate::objective::LossMode;
use crate::substrate::{NeuronParams, ParamGroup, SubstrateConfig};
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "ITL_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// 16x16 latency-coded digits, feed-forward.
    Mnist16,
    /// Spoken-digit events, recurrent.
    Shd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Train,
    Eval,
    LatencySweep,
    DecalibSweep,
    SparsitySweep,
    SilenceAblation,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::Eval => "eval",
            Experiment::LatencySweep => "latency_sweep",
            Experiment::DecalibSweep => "decalib_sweep",
            Experiment::SparsitySweep => "sparsity_sweep",
            Experiment::SilenceAblation => "silence_ablation",
        }
    }

    pub fn is_sweep(self) -> bool {
        !matches!(self, Experiment::Train | Experiment::Eval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reduced sample counts and epochs.
    Desk,
    /// Full protocol.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechSource {
    /// In-memory generator, no files needed.
    Synthetic,
    /// Text event files below the data root.
    Files,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecalibGroup {
    Tau,
    Gap,
    Both,
}

impl DecalibGroup {
    pub fn name(self) -> &'static str {
        match self {
            DecalibGroup::Tau => "tau",
            DecalibGroup::Gap => "gap",
            DecalibGroup::Both => "both",
        }
    }

    pub fn params(self) -> Vec<ParamGroup> {
        match self {
            DecalibGroup::Tau => vec![ParamGroup::TimeConstants],
            DecalibGroup::Gap => vec![ParamGroup::ThresholdGap],
            DecalibGroup::Both => vec![ParamGroup::TimeConstants, ParamGroup::ThresholdGap],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Training samples to use (0 = all available).
    pub train_samples: usize,
    pub test_samples: usize,
    /// Apply stochastic augmentation during training.
    pub augment: bool,
    /// Maximum rotation for image augmentation, degrees.
    pub rotate_deg: f64,
    pub latency: LatencyCoderParams,
    pub speech_source: SpeechSource,
    /// Event files relative to `root`.
    pub speech_train_file: PathBuf,
    pub speech_test_file: PathBuf,
    /// Raw time (s) is multiplied by `1e6 / time_scale` to obtain µs.
    pub time_scale: f64,
    /// Speech stimulus window, µs.
    pub speech_duration: f64,
    /// Channel jitter for augmentation, raw channels.
    pub jitter_sigma: f64,
    pub synthetic_seed: u64,
    pub synthetic: SyntheticSpeechParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub sigma_d: Vec<f64>,
    pub groups: Vec<DecalibGroup>,
    pub rho_b: Vec<f64>,
    pub silence_fractions: Vec<f64>,
    /// Random silencing masks averaged per fraction.
    pub silence_draws: usize,
    pub dropout: Vec<f64>,
    /// Restriction windows for the latency curve, µs.
    pub t_limits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub preset: Preset,
    pub task: Task,
    pub experiment: Experiment,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Sweep points trained concurrently.
    pub jobs: usize,
    /// Model to evaluate instead of training (eval and latency sweeps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub substrate: SubstrateConfig,
    pub neuron: NeuronParams,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn preset(task: Task, preset: Preset) -> Self {
        let paper = preset == Preset::Paper;
        let seeds = if paper { (0..5).collect() } else { vec![0] };
        let data = DataConfig {
            root: PathBuf::from("data"),
            train_samples: if paper { 0 } else { 5000 },
            test_samples: if paper { 0 } else { 1000 },
            augment: false,
            rotate_deg: 0.0,
            latency: LatencyCoderParams::default(),
            speech_source: if paper { SpeechSource::Files } else { SpeechSource::Synthetic },
            speech_train_file: PathBuf::from("shd/train.txt"),
            speech_test_file: PathBuf::from("shd/test.txt"),
            time_scale: 2000.0,
            speech_duration: 200.0,
            jitter_sigma: 0.0,
            synthetic_seed: 7,
            synthetic: SyntheticSpeechParams::default(),
        };
        let sweep = SweepConfig {
            sigma_d: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            groups: vec![DecalibGroup::Tau, DecalibGroup::Gap, DecalibGroup::Both],
            rho_b: vec![0.0, 0.005, 0.05, 0.5, 5.0],
            silence_fractions: vec![0.0, 0.05, 0.1, 0.15],
            silence_draws: 20,
            dropout: vec![0.0, 0.4],
            t_limits: (0..=15).map(|k| 2.0 * k as f64).collect(),
        };
        let base = |substrate, neuron, train, data| RunConfig {
            version: SCHEMA_VERSION,
            preset,
            task,
            experiment: Experiment::Train,
            output_dir: PathBuf::from("runs"),
            seeds,
            jobs: 1,
            checkpoint: None,
            data,
            substrate,
            neuron,
            train,
            sweep,
        };
        match task {
            Task::Mnist16 => {
                let train = TrainConfig { epochs: if paper { 100 } else { 30 }, ..TrainConfig::mnist() };
                base(SubstrateConfig::default(), NeuronParams::mnist(), train, data)
            }
            Task::Shd => {
                let substrate = SubstrateConfig {
                    n_in: SHD_KEPT,
                    n_hidden: 186,
                    n_out: if paper { 20 } else { 4 },
                    recurrent: true,
                    ..SubstrateConfig::default()
                };
                let train = TrainConfig { epochs: if paper { 100 } else { 50 }, ..TrainConfig::shd() };
                let data = DataConfig {
                    train_samples: if paper { 0 } else { 300 },
                    test_samples: if paper { 0 } else { 200 },
                    speech_duration: if paper { 700.0 } else { 200.0 },
                    ..data
                };
                let mut cfg = base(substrate, NeuronParams::shd(), train, data);
                cfg.sweep.t_limits = (0..=10).map(|k| 20.0 * k as f64).collect();
                cfg
            }
        }
    }

    /// Parses `text` on top of the preset it names (or `preset` when given),
    /// then validates the result. Unknown keys are errors.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> Result<Self, HarnessError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        match user.get("version") {
            Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
            Some(v) => return Err(HarnessError::Config(format!("unsupported schema version {v}"))),
            None => return Err(HarnessError::Config("missing `version`".into())),
        }
        let field = |key: &str| -> Result<Option<String>, HarnessError> {
            match user.get(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s.clone())),
                Some(v) => Err(HarnessError::Config(format!("`{key}` must be a string, got {v}"))),
            }
        };
        let task: Task = match field("task")? {
            Some(s) => enum_value(s, "task")?,
            None => Task::Mnist16,
        };
        let preset = match (preset, field("preset")?) {
            (Some(p), _) => p,
            (None, Some(s)) => enum_value(s, "preset")?,
            (None, None) => Preset::Desk,
        };
        let base = toml::Table::try_from(Self::preset(task, preset)).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut merged = base;
        merge(&mut merged, user);
        merged.insert("preset".into(), toml::Value::try_from(preset).expect("enum serializes"));
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, preset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Data root after applying the environment override.
    pub fn data_root(&self) -> PathBuf {
        std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.data.root.clone())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.version != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.version));
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must not be empty".into());
        }
        if self.jobs == 0 {
            return bad("`jobs` must be at least 1".into());
        }
        self.substrate.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.neuron.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if (self.train.model.dt - self.substrate.dt_sample).abs() > 1e-12 {
            return bad(format!(
                "train.model.dt ({}) must equal substrate.dt_sample ({})",
                self.train.model.dt, self.substrate.dt_sample
            ));
        }
        let n_in = match self.task {
            Task::Mnist16 => SMALL_SIDE * SMALL_SIDE,
            Task::Shd => SHD_KEPT,
        };
        if self.substrate.n_in != n_in {
            return bad(format!("task needs substrate.n_in = {n_in}, got {}", self.substrate.n_in));
        }
        if self.task == Task::Mnist16 && self.substrate.n_out != 10 {
            return bad(format!("task needs substrate.n_out = 10, got {}", self.substrate.n_out));
        }
        if self.task == Task::Shd
            && self.data.speech_source == SpeechSource::Synthetic
            && self.data.synthetic.n_classes != self.substrate.n_out
        {
            return bad("data.synthetic.n_classes must equal substrate.n_out".into());
        }
        if self.task == Task::Shd && self.train.loss.mode != LossMode::SumOverTime && self.train.loss.rho_r > 0.0 {
            log::warn!("rate regularizer combined with max-over-time loss");
        }
        if !(self.data.time_scale > 0.0) || !(self.data.speech_duration > 0.0) {
            return bad("data.time_scale and data.speech_duration must be positive".into());
        }
        let s = &self.sweep;
        let unit = |xs: &[f64], name: &str, hi_open: bool| -> Result<(), HarnessError> {
            match xs.iter().find(|&&x| !(x >= 0.0 && (if hi_open { x < 1.0 } else { x <= 1.0 }))) {
                Some(x) => Err(HarnessError::Config(format!("sweep.{name} entry {x} out of range"))),
                None => Ok(()),
            }
        };
        match self.experiment {
            Experiment::DecalibSweep => {
                if s.sigma_d.is_empty() || s.groups.is_empty() {
                    return bad("decalibration sweep needs sweep.sigma_d and sweep.groups".into());
                }
                if s.sigma_d.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    return bad("sweep.sigma_d entries must be non-negative".into());
                }
            }
            Experiment::SparsitySweep => {
                if s.rho_b.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    return bad("sweep.rho_b entries must be non-negative".into());
                }
                let pos: Vec<f64> = s.rho_b.iter().copied().filter(|&x| x > 0.0).collect();
                let lo = pos.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = pos.iter().copied().fold(0.0, f64::max);
                if pos.is_empty() || hi < 10.0 * lo * (1.0 - 1e-12) {
                    return bad("sweep.rho_b must span at least one decade".into());
                }
            }
            Experiment::SilenceAblation => {
                if s.silence_fractions.is_empty() || s.dropout.is_empty() {
                    return bad("silence ablation needs sweep.silence_fractions and sweep.dropout".into());
                }
                unit(&s.silence_fractions, "silence_fractions", false)?;
                if s.silence_draws == 0 {
                    return bad("sweep.silence_draws must be at least 1".into());
                }
                unit(&s.dropout, "dropout", true)?;
            }
            Experiment::LatencySweep => {
                if s.t_limits.is_empty() || s.t_limits.iter().any(|&t| !(t >= 0.0)) {
                    return bad("sweep.t_limits must be a non-empty list of non-negative times".into());
                }
            }
            Experiment::Eval => {
                if self.checkpoint.is_none() {
                    return bad("eval needs `checkpoint`".into());
                }
            }
            Experiment::Train => {}
        }
        Ok(())
    }
}

fn enum_value<T: serde::de::DeserializeOwned>(s: String, key: &str) -> Result<T, HarnessError> {
    toml::Value::String(s).try_into().map_err(|e| HarnessError::Config(format!("{key}: {e}")))
}

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
