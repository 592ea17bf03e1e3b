//! Experiment drivers.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::{DecalibGroup, Experiment, RunConfig, SpeechSource, Task};
use super::metrics::{
    status, summary_columns, DecalibRow, EpochRecord, EvalRow, LatencyRow, MetricsSink, SilenceRow, SparsityRow,
    SummaryRows, TrainRow,
};
use super::HarnessError;
use crate::checkpoint::Checkpoint;
use crate::data::{LatencyImages, SpeechEvents};
use crate::encoding::{load_events, load_idx, synthetic_speech, EventDataset};
use crate::exec;
use crate::rng::{self, domain};
use crate::substrate::Substrate;
use crate::trainer::{Backend, BackendKind, EvalStats, SampleSource, Trainer};

/// Training and test sources of one task.
pub struct TaskData {
    pub train: Box<dyn SampleSource>,
    pub test: Box<dyn SampleSource>,
}

fn limit(n: usize) -> usize {
    if n == 0 {
        usize::MAX
    } else {
        n
    }
}

fn existing(candidates: &[PathBuf]) -> Result<PathBuf, HarnessError> {
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| HarnessError::Data(format!("none of {candidates:?} exists")))
}

fn idx_pair(dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf), HarnessError> {
    let both = |kind: &str| {
        let base = format!("{prefix}-{kind}-ubyte");
        existing(&[dir.join(format!("{base}.gz")), dir.join(base)])
    };
    Ok((both("images-idx3")?, both("labels-idx1")?))
}

fn truncate(mut ds: EventDataset, n: usize) -> EventDataset {
    ds.samples.truncate(limit(n));
    ds
}

/// Loads (or generates) the task's datasets. Missing files map to
/// [`HarnessError::Data`].
pub fn load_data(cfg: &RunConfig) -> Result<TaskData, HarnessError> {
    let root = cfg.data_root();
    let d = &cfg.data;
    let data_err = |e: crate::encoding::EncodingError| HarnessError::Data(e.to_string());
    match cfg.task {
        Task::Mnist16 => {
            let dir = root.join("mnist");
            let (ti, tl) = idx_pair(&dir, "train")?;
            let (vi, vl) = idx_pair(&dir, "t10k")?;
            let train = load_idx(&ti, &tl, limit(d.train_samples)).map_err(data_err)?;
            let test = load_idx(&vi, &vl, limit(d.test_samples)).map_err(data_err)?;
            let rot = if d.augment { d.rotate_deg } else { 0.0 };
            let train = LatencyImages::from_mnist(&train, d.latency.clone(), rot).map_err(data_err)?;
            let test = LatencyImages::from_mnist(&test, d.latency.clone(), 0.0).map_err(data_err)?;
            Ok(TaskData { train: Box::new(train), test: Box::new(test) })
        }
        Task::Shd => {
            let (train, test) = match d.speech_source {
                SpeechSource::Synthetic => {
                    if d.train_samples == 0 || d.test_samples == 0 {
                        return Err(HarnessError::Config("synthetic speech needs explicit sample counts".into()));
                    }
                    (
                        synthetic_speech(&d.synthetic, d.train_samples, d.synthetic_seed, 0),
                        synthetic_speech(&d.synthetic, d.test_samples, d.synthetic_seed, 1),
                    )
                }
                SpeechSource::Files => {
                    let load = |f: &Path| {
                        let p = root.join(f);
                        if !p.is_file() {
                            return Err(HarnessError::Data(format!("{} does not exist", p.display())));
                        }
                        load_events(&p).map_err(data_err)
                    };
                    (
                        truncate(load(&d.speech_train_file)?, d.train_samples),
                        truncate(load(&d.speech_test_file)?, d.test_samples),
                    )
                }
            };
            if train.n_classes != cfg.substrate.n_out {
                return Err(HarnessError::Config(format!(
                    "dataset has {} classes but substrate.n_out = {}",
                    train.n_classes, cfg.substrate.n_out
                )));
            }
            let jitter = if d.augment { d.jitter_sigma } else { 0.0 };
            let train = SpeechEvents::new(train, d.time_scale, d.speech_duration, jitter).map_err(data_err)?;
            let test = SpeechEvents::new(test, d.time_scale, d.speech_duration, 0.0).map_err(data_err)?;
            Ok(TaskData { train: Box::new(train), test: Box::new(test) })
        }
    }
}

/// Modifications of the base configuration for one sweep point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Variant {
    pub decalib: Option<(f64, DecalibGroup)>,
    pub rho_b: Option<f64>,
    pub dropout_p: Option<f64>,
}

impl Variant {
    /// Run label used in `epochs.csv` and checkpoint names.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some((s, g)) = self.decalib {
            parts.push(format!("decalib-{}-{s}", g.name()));
        }
        if let Some(r) = self.rho_b {
            parts.push(format!("rho_b-{r}"));
        }
        if let Some(p) = self.dropout_p {
            parts.push(format!("dropout-{p}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join("_")
        }
    }

    /// The configuration a plain training run of this variant would use.
    pub fn apply(&self, cfg: &RunConfig, seed: u64) -> RunConfig {
        let mut c = cfg.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        if let Some(r) = self.rho_b {
            c.train.loss.rho_b = r;
        }
        if let Some(p) = self.dropout_p {
            c.train.dropout_p = p;
        }
        c
    }
}

pub struct TrainedModel {
    pub trainer: Trainer,
    pub epochs: Vec<EpochRecord>,
    pub test: EvalStats,
    /// Training accuracy of the final epoch.
    pub train_acc: f64,
}

/// Fresh trainer for `seed`, with the substrate decalibrated if requested.
fn build_trainer(cfg: &RunConfig, seed: u64, variant: &Variant) -> Result<Trainer, HarnessError> {
    let c = variant.apply(cfg, seed);
    let backend = match c.train.backend {
        BackendKind::Software => Backend::Software,
        BackendKind::Substrate => {
            let cerr = |e: crate::substrate::SubstrateError| HarnessError::Config(e.to_string());
            let mut s = Substrate::build(c.substrate.clone(), c.neuron.clone()).map_err(cerr)?;
            if let Some((sigma, group)) = variant.decalib {
                let key = rng::mix(&[c.substrate.seed, seed]);
                s = s.decalibrate(sigma, &group.params(), key).map_err(cerr)?;
            }
            Backend::Substrate(Box::new(s))
        }
    };
    Ok(Trainer::new(c.train.clone(), backend, c.substrate.topology())?)
}

/// Trains one model for the configured number of epochs, evaluating on the
/// test set after each epoch.
pub fn train_model(cfg: &RunConfig, data: &TaskData, seed: u64, variant: &Variant) -> Result<TrainedModel, HarnessError> {
    let mut trainer = build_trainer(cfg, seed, variant)?;
    let label = variant.label();
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut test = EvalStats::default();
    let mut train_acc = 0.0;
    for _ in 0..cfg.train.epochs {
        let s = trainer.train_epoch(data.train.as_ref(), cfg.data.augment)?;
        if !s.train_loss.is_finite() {
            return Err(HarnessError::Numerical(format!("training loss is {} in epoch {}", s.train_loss, s.epoch)));
        }
        test = trainer.evaluate(data.test.as_ref(), None)?;
        train_acc = s.train_acc;
        log::info!(
            "{label} seed {seed} epoch {:>3}: loss {:.4} train {:.4} test {:.4} spikes {:.1}",
            s.epoch,
            s.train_loss,
            s.train_acc,
            test.accuracy,
            test.mean_hidden_spikes
        );
        epochs.push(EpochRecord {
            run: label.clone(),
            seed,
            epoch: s.epoch,
            train_loss: s.train_loss,
            train_acc: s.train_acc,
            test_acc: test.accuracy,
            mean_hidden_spikes: test.mean_hidden_spikes,
            eta_t: s.eta,
        });
    }
    if cfg.train.epochs == 0 {
        test = trainer.evaluate(data.test.as_ref(), None)?;
    }
    Ok(TrainedModel { trainer, epochs, test, train_acc })
}

fn save_checkpoint(dir: &Path, cfg: &RunConfig, seed: u64, variant: &Variant, t: &Trainer) -> Result<(), HarnessError> {
    let dir = dir.join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    let mut c = variant.apply(cfg, seed);
    c.experiment = Experiment::Train;
    c.checkpoint = None;
    let ckpt = Checkpoint {
        config: c.to_toml(),
        epoch: t.epoch as u64,
        seed,
        weights: t.weights.clone(),
        opt: t.opt.clone(),
        silenced: t.silenced.clone(),
    };
    ckpt.save(&dir.join(format!("{}-seed{seed}.ckpt", variant.label())))
        .map_err(|e| HarnessError::Io(e.to_string()))
}

/// Trainer on the configured (calibrated) device holding the weights of a checkpoint.
fn restore(cfg: &RunConfig, seed: u64, path: &Path) -> Result<Trainer, HarnessError> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        crate::checkpoint::CheckpointError::Io(io) => HarnessError::Data(format!("{}: {io}", path.display())),
        other => HarnessError::Config(format!("{}: {other}", path.display())),
    })?;
    let mut t = build_trainer(cfg, seed, &Variant::default())?;
    if ckpt.weights.topology() != t.topology() || ckpt.silenced.len() != t.silenced.len() {
        return Err(HarnessError::Config(format!("{} does not match the configured network", path.display())));
    }
    t.weights = ckpt.weights;
    t.opt = ckpt.opt;
    t.epoch = ckpt.epoch as usize;
    t.silenced = ckpt.silenced;
    Ok(t)
}

/// Everything one run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub summary: SummaryRows,
    /// First failure among the sweep points; all rows are still written.
    pub failure: Option<HarnessError>,
}

#[derive(Clone, Debug)]
enum Point {
    Train(u64),
    Eval(u64),
    Latency(u64),
    /// Decalibration for all `groups` sharing one trained model (sigma = 0).
    Decalib { sigma: f64, groups: Vec<DecalibGroup>, seed: u64 },
    Sparsity { rho_b: f64, seed: u64 },
    Silence { dropout_p: f64, seed: u64 },
}

enum Row {
    Train(TrainRow),
    Eval(EvalRow),
    Latency(LatencyRow),
    Decalib(DecalibRow),
    Sparsity(SparsityRow),
    Silence(SilenceRow),
}

struct PointResult {
    epochs: Vec<EpochRecord>,
    rows: Vec<Row>,
    error: Option<HarnessError>,
}

fn points(cfg: &RunConfig) -> Vec<Point> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    match cfg.experiment {
        Experiment::Train => out.extend(cfg.seeds.iter().map(|&k| Point::Train(k))),
        Experiment::Eval => out.extend(cfg.seeds.iter().map(|&k| Point::Eval(k))),
        Experiment::LatencySweep => out.extend(cfg.seeds.iter().map(|&k| Point::Latency(k))),
        Experiment::DecalibSweep => {
            for &sigma in &s.sigma_d {
                for &seed in &cfg.seeds {
                    if sigma == 0.0 {
                        out.push(Point::Decalib { sigma, groups: s.groups.clone(), seed });
                    } else {
                        out.extend(s.groups.iter().map(|&g| Point::Decalib { sigma, groups: vec![g], seed }));
                    }
                }
            }
        }
        Experiment::SparsitySweep => {
            for &rho_b in &s.rho_b {
                out.extend(cfg.seeds.iter().map(|&seed| Point::Sparsity { rho_b, seed }));
            }
        }
        Experiment::SilenceAblation => {
            for &dropout_p in &s.dropout {
                out.extend(cfg.seeds.iter().map(|&seed| Point::Silence { dropout_p, seed }));
            }
        }
    }
    out
}

/// Hidden units silenced at `fraction` in draw `draw`: a random order per
/// (seed, draw), so within a draw larger fractions contain the smaller ones.
fn silence_mask(n: usize, fraction: f64, seed: u64, draw: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, domain::SILENCE, draw));
    let k = (fraction * n as f64).round() as usize;
    let mut mask = vec![false; n];
    order.iter().take(k).for_each(|&i| mask[i] = true);
    mask
}

fn run_point(cfg: &RunConfig, data: &TaskData, dir: &Path, point: &Point) -> PointResult {
    let mut epochs = Vec::new();
    let mut train = |variant: &Variant, seed: u64| -> Result<TrainedModel, HarnessError> {
        let model = train_model(cfg, data, seed, variant);
        let model = model?;
        epochs.extend(model.epochs.iter().cloned());
        save_checkpoint(dir, cfg, seed, variant, &model.trainer)?;
        Ok(model)
    };
    let mut rows = Vec::new();
    let error = match point {
        &Point::Train(seed) => {
            let r = train(&Variant::default(), seed);
            let m = r.as_ref().ok();
            rows.push(Row::Train(TrainRow {
                seed,
                train_acc: m.map(|m| m.train_acc),
                test_acc: m.map(|m| m.test.accuracy),
                mean_spikes: m.map(|m| m.test.mean_hidden_spikes),
                status: status(r.as_ref().err()),
            }));
            r.err()
        }
        &Point::Eval(seed) => {
            let path = cfg.checkpoint.as_deref().expect("validated");
            let r = restore(cfg, seed, path).and_then(|mut t| Ok(t.evaluate(data.test.as_ref(), None)?));
            let m = r.as_ref().ok();
            rows.push(Row::Eval(EvalRow {
                seed,
                test_acc: m.map(|m| m.accuracy),
                mean_spikes: m.map(|m| m.mean_hidden_spikes),
                status: status(r.as_ref().err()),
            }));
            r.err()
        }
        &Point::Latency(seed) => {
            let limits = &cfg.sweep.t_limits;
            let r = match cfg.checkpoint.as_deref() {
                Some(path) => restore(cfg, seed, path),
                None => train(&Variant::default(), seed).map(|m| m.trainer),
            }
            .and_then(|mut t| Ok(t.evaluate_curve(data.test.as_ref(), limits)?.0));
            for (i, &t_limit) in limits.iter().enumerate() {
                let test_acc = r.as_ref().ok().map(|a| a[i]);
                rows.push(Row::Latency(LatencyRow { seed, t_limit, test_acc, status: status(r.as_ref().err()) }));
            }
            r.err()
        }
        Point::Decalib { sigma, groups, seed } => {
            let variant = Variant { decalib: Some((*sigma, groups[0])), ..Variant::default() };
            let r = train(&variant, *seed);
            let m = r.as_ref().ok();
            for g in groups {
                rows.push(Row::Decalib(DecalibRow {
                    group: g.name().into(),
                    sigma_d: *sigma,
                    seed: *seed,
                    test_acc: m.map(|m| m.test.accuracy),
                    train_acc: m.map(|m| m.train_acc),
                    mean_spikes: m.map(|m| m.test.mean_hidden_spikes),
                    status: status(r.as_ref().err()),
                }));
            }
            r.err()
        }
        &Point::Sparsity { rho_b, seed } => {
            let r = train(&Variant { rho_b: Some(rho_b), ..Variant::default() }, seed);
            let m = r.as_ref().ok();
            rows.push(Row::Sparsity(SparsityRow {
                rho_b,
                seed,
                test_acc: m.map(|m| m.test.accuracy),
                mean_spikes: m.map(|m| m.test.mean_hidden_spikes),
                status: status(r.as_ref().err()),
            }));
            r.err()
        }
        &Point::Silence { dropout_p, seed } => {
            let fractions = &cfg.sweep.silence_fractions;
            let r = train(&Variant { dropout_p: Some(dropout_p), ..Variant::default() }, seed).and_then(|m| {
                let mut t = m.trainer;
                let n = t.silenced.len();
                let draws = cfg.sweep.silence_draws;
                fractions
                    .iter()
                    .map(|&f| {
                        // The unsilenced network needs a single evaluation.
                        let k = if f == 0.0 { 1 } else { draws };
                        let (mut acc, mut spikes) = (0.0, 0.0);
                        for d in 0..k {
                            t.silenced = silence_mask(n, f, seed, d as u64);
                            let m = t.evaluate(data.test.as_ref(), None)?;
                            acc += m.accuracy;
                            spikes += m.mean_hidden_spikes;
                        }
                        Ok((acc / k as f64, spikes / k as f64))
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()
            });
            for (i, &fraction) in fractions.iter().enumerate() {
                let m = r.as_ref().ok().map(|v| &v[i]);
                rows.push(Row::Silence(SilenceRow {
                    dropout_p,
                    fraction,
                    seed,
                    test_acc: m.map(|m| m.0),
                    mean_spikes: m.map(|m| m.1),
                    status: status(r.as_ref().err()),
                }));
            }
            r.err()
        }
    };
    PointResult { epochs, rows, error }
}

/// Executes the configured experiment for every seed and writes the run
/// directory. Data and configuration problems abort before any training;
/// failures of individual sweep points are recorded as rows and reported in
/// [`RunOutcome::failure`].
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let name = cfg.experiment.name();
    let mut sink = MetricsSink::create(&dir, name, summary_columns(cfg.experiment))?;
    let pts = points(cfg);
    let mut epochs = Vec::new();
    let mut rows = Vec::new();
    let mut failure = None;
    exec::with_threads(cfg.train.threads, || -> Result<(), HarnessError> {
        for batch in pts.chunks(cfg.jobs) {
            let results = exec::map_indexed(batch.len(), |i| run_point(cfg, &data, &dir, &batch[i]));
            for r in results {
                for e in &r.epochs {
                    sink.epoch(e)?;
                }
                for row in &r.rows {
                    let err = r.error.as_ref();
                    match row {
                        Row::Train(x) => sink.row("train", x, err)?,
                        Row::Eval(x) => sink.row("eval", x, err)?,
                        Row::Latency(x) => sink.row("latency", x, err)?,
                        Row::Decalib(x) => sink.row("decalib", x, err)?,
                        Row::Sparsity(x) => sink.row("sparsity", x, err)?,
                        Row::Silence(x) => sink.row("silence", x, err)?,
                    }
                }
                sink.flush()?;
                if let Some(e) = &r.error {
                    log::error!("sweep point failed: {e}");
                }
                epochs.extend(r.epochs);
                rows.extend(r.rows);
                if failure.is_none() {
                    failure = r.error;
                }
            }
        }
        Ok(())
    })?;
    let summary = collect(cfg.experiment, rows);
    Ok(RunOutcome { dir, epochs, summary, failure })
}

fn collect(experiment: Experiment, rows: Vec<Row>) -> SummaryRows {
    macro_rules! pick {
        ($variant:ident) => {
            SummaryRows::$variant(rows.into_iter().filter_map(|r| if let Row::$variant(x) = r { Some(x) } else { None }).collect())
        };
    }
    match experiment {
        Experiment::Train => pick!(Train),
        Experiment::Eval => pick!(Eval),
        Experiment::LatencySweep => pick!(Latency),
        Experiment::DecalibSweep => pick!(Decalib),
        Experiment::SparsitySweep => pick!(Sparsity),
        Experiment::SilenceAblation => pick!(Silence),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_masks_are_nested_and_sized() {
        let small = silence_mask(246, 0.05, 3, 0);
        let large = silence_mask(246, 0.15, 3, 0);
        assert_eq!(small.iter().filter(|&&b| b).count(), 12);
        assert_eq!(large.iter().filter(|&&b| b).count(), 37);
        assert!(small.iter().zip(&large).all(|(&s, &l)| !s || l));
        assert_ne!(large, silence_mask(246, 0.15, 3, 1));
        assert!(silence_mask(10, 0.0, 1, 0).iter().all(|&b| !b));
    }

    #[test]
    fn variant_labels() {
        assert_eq!(Variant::default().label(), "base");
        let v = Variant { decalib: Some((0.3, DecalibGroup::Both)), ..Variant::default() };
        assert_eq!(v.label(), "decalib-both-0.3");
        assert_eq!(Variant { rho_b: Some(0.005), ..Variant::default() }.label(), "rho_b-0.005");
    }
}
