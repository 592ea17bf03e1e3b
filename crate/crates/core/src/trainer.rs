//! In-the-loop training: quantize and upload, emulate, assemble the graph,
//! evaluate the objective, backpropagate, update the shadow weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::EventSample;
use crate::exec;
use crate::graph::{GraphError, GraphState, Gradients, ModelParams, Seeds};
use crate::matrix::Matrix;
use crate::network::{steps_for, NetworkWeights, Topology};
use crate::objective::{self, LossConfig, ObjectiveError};
use crate::rng::{self, domain};
use crate::substrate::{EmulateOptions, QuantizedWeights, Substrate, SubstrateError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

impl TrainError {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFinite(_) | TrainError::Graph(GraphError::NonFinite { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Forward pass on the emulated substrate, graph with injected recordings.
    Substrate,
    /// Pure software: the graph simulates itself, no quantization.
    Software,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub gamma_eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    /// Weight initialization spread; std is `sigma_w_hat / sqrt(fan_in)`.
    pub sigma_w_hat: f64,
    /// Largest representable input/recurrent weight (fixed quantization scale `w_cap / weight_max`).
    pub w_cap: f64,
    pub seed: u64,
    pub backend: BackendKind,
    /// Worker threads for batch parallelism (0 = all cores).
    pub threads: usize,
    pub loss: LossConfig,
    pub model: ModelParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mnist()
    }
}

impl TrainConfig {
    pub fn mnist() -> Self {
        Self {
            eta: 1.5e-3,
            gamma_eta: 0.03,
            epochs: 100,
            batch_size: 100,
            dropout_p: 0.0,
            sigma_w_hat: 0.24,
            w_cap: 1.0,
            seed: 0,
            backend: BackendKind::Substrate,
            threads: 0,
            loss: LossConfig::mnist(),
            model: ModelParams::mnist(),
        }
    }

    pub fn shd() -> Self {
        Self { gamma_eta: 0.025, loss: LossConfig::shd(), model: ModelParams::shd(), ..Self::mnist() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma_eta) {
            return bad("gamma_eta must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.w_cap > 0.0) || !(self.sigma_w_hat >= 0.0) {
            return bad("w_cap must be positive and sigma_w_hat non-negative");
        }
        let l = &self.loss;
        if [l.rho_a, l.rho_b, l.rho_r].iter().any(|&r| !(r >= 0.0)) {
            return bad("regularizer strengths must be non-negative");
        }
        self.model.validate().map_err(TrainError::from)
    }
}

/// Kaiming-style initialization: each matrix is drawn from
/// `Normal(0, (sigma_w_hat / sqrt(fan_in))^2)`, fan-in being its row count.
pub fn init_weights(sigma_w_hat: f64, topo: &Topology, rng: &mut impl Rng) -> NetworkWeights {
    let mut w = NetworkWeights::zeros(topo);
    if sigma_w_hat == 0.0 {
        return w;
    }
    for m in w.matrices_mut() {
        let std = sigma_w_hat / (m.rows() as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        m.as_mut_slice().iter_mut().for_each(|x| *x = dist.sample(rng));
    }
    if let Some(rec) = w.w_rec.as_mut() {
        for j in 0..rec.rows() {
            rec.set(j, j, 0.0);
        }
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QuantPolicy {
    FixedScale(f64),
    /// Largest magnitude maps to `weight_max`.
    Dynamic,
}

/// `q = clamp(round(w / s), -weight_max, weight_max)`, rounding half away from zero.
pub fn quantize(w: &Matrix, policy: QuantPolicy, weight_max: i16) -> Result<QuantizedWeights, TrainError> {
    if !w.is_finite() {
        return Err(TrainError::NonFinite("weights passed to quantize".into()));
    }
    let max = weight_max as f64;
    let scale = match policy {
        QuantPolicy::FixedScale(s) => s,
        QuantPolicy::Dynamic => {
            let m = w.max_abs();
            if m == 0.0 {
                1.0
            } else {
                m / max
            }
        }
    };
    if !(scale > 0.0) {
        return Err(TrainError::Config(format!("quantization scale {scale} must be positive")));
    }
    let values = w.as_slice().iter().map(|&x| (x / scale).round().clamp(-max, max) as i16).collect();
    Ok(QuantizedWeights::new(w.rows(), w.cols(), values, scale))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: NetworkWeights,
    pub v: NetworkWeights,
    pub step: u64,
}

impl OptimState {
    pub fn new(topo: &Topology) -> Self {
        Self { m: NetworkWeights::zeros(topo), v: NetworkWeights::zeros(topo), step: 0 }
    }
}

/// Bias-corrected Adam update of the shadow weights.
pub fn adam_step(
    weights: &mut NetworkWeights,
    grads: &Gradients,
    opt: &mut OptimState,
    eta: f64,
) -> Result<(), TrainError> {
    if !grads.is_finite() {
        return Err(TrainError::NonFinite("gradient".into()));
    }
    if weights.topology() != opt.m.topology() {
        return Err(TrainError::Config("optimizer state does not match the weights".into()));
    }
    opt.step += 1;
    let b1t = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let b2t = 1.0 - ADAM_BETA2.powi(opt.step as i32);
    let parts = weights
        .matrices_mut()
        .zip(grads.matrices())
        .zip(opt.m.matrices_mut().zip(opt.v.matrices_mut()));
    for ((w, g), (m, v)) in parts {
        let it = w.as_mut_slice().iter_mut().zip(g.as_slice());
        for ((w, &g), (m, v)) in it.zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice())) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *w -= eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `eta0 * (1 - gamma_eta)^epoch`.
pub fn lr_schedule(eta0: f64, gamma_eta: f64, epoch: usize) -> Result<f64, TrainError> {
    if !(0.0..1.0).contains(&gamma_eta) {
        return Err(TrainError::Config(format!("gamma_eta = {gamma_eta} must lie in [0, 1)")));
    }
    Ok(eta0 * (1.0 - gamma_eta).powi(epoch as i32))
}

/// A labelled stimulus collection the trainer can draw from.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn n_channels(&self) -> usize;
    fn n_classes(&self) -> usize;
    /// Stimulus duration, µs.
    fn duration(&self) -> f64;
    /// Sample `index`; `augment` carries the stream key for stochastic
    /// augmentation, `None` yields the clean stimulus.
    fn sample(&self, index: usize, augment: Option<u64>) -> EventSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where the forward pass runs.
#[derive(Clone, Debug)]
pub enum Backend {
    Substrate(Box<Substrate>),
    Software,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub mean_train_spikes: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub accuracy: f64,
    pub mean_hidden_spikes: f64,
    pub samples: usize,
}

/// Weights as seen by the device for one batch.
struct Upload {
    effective: NetworkWeights,
    /// Factor applied to hidden-outgoing weights (dropout rescaling).
    out_gain: f64,
}

#[derive(Default)]
struct ChunkResult {
    grads: Option<Gradients>,
    loss: f64,
    correct: usize,
    spikes: f64,
    error: Option<TrainError>,
}

/// Samples per work item. Fixed so that reduction order, and therefore the
/// result bits, do not depend on the number of threads.
const CHUNK: usize = 4;

/// Training loop state: configuration, device, shadow weights and Adam moments.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub backend: Backend,
    pub weights: NetworkWeights,
    pub opt: OptimState,
    /// Next epoch to run.
    pub epoch: usize,
    /// Permanently silenced hidden units (defects), applied in training and evaluation.
    pub silenced: Vec<bool>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, backend: Backend, topo: Topology) -> Result<Self, TrainError> {
        cfg.validate()?;
        if let Backend::Substrate(s) = &backend {
            if s.config().topology() != topo {
                return Err(TrainError::Config("substrate topology differs from the network".into()));
            }
        }
        let mut rng = rng::stream(cfg.seed, domain::INIT, 0);
        let weights = init_weights(cfg.sigma_w_hat, &topo, &mut rng);
        Ok(Self { opt: OptimState::new(&topo), silenced: vec![false; topo.n_hidden], cfg, backend, weights, epoch: 0 })
    }

    pub fn topology(&self) -> Topology {
        self.weights.topology()
    }

    /// Quantizes the shadow weights (scaled by `out_gain` on hidden-outgoing
    /// matrices) and uploads them; returns the real weights the device uses.
    fn upload(&mut self, out_gain: f64) -> Result<Upload, TrainError> {
        let mut scaled = self.weights.clone();
        scaled.w_out.scale(out_gain);
        if let Some(r) = scaled.w_rec.as_mut() {
            r.scale(out_gain);
            for j in 0..r.rows() {
                r.set(j, j, 0.0);
            }
        }
        let effective = match &mut self.backend {
            Backend::Software => scaled,
            Backend::Substrate(s) => {
                let wmax = s.config().weight_max;
                let fixed = QuantPolicy::FixedScale(self.cfg.w_cap / wmax as f64);
                let q_in = quantize(&scaled.w_in, fixed, wmax)?;
                let q_rec = scaled.w_rec.as_ref().map(|m| quantize(m, fixed, wmax)).transpose()?;
                let q_out = quantize(&scaled.w_out, QuantPolicy::Dynamic, wmax)?;
                s.set_weights(&q_in, q_rec.as_ref(), &q_out)?;
                let (w_in, w_rec, w_out) = s.effective_weights();
                NetworkWeights { w_in: w_in.clone(), w_rec: w_rec.cloned(), w_out: w_out.clone() }
            }
        };
        Ok(Upload { effective, out_gain })
    }

    fn set_mask(&mut self, mask: &[bool]) -> Result<(), TrainError> {
        if let Backend::Substrate(s) = &mut self.backend {
            s.silence(mask)?;
        }
        Ok(())
    }

    /// Forward pass of one stimulus on the configured backend, returning the
    /// differentiable graph.
    fn forward(
        &self,
        upload: &Upload,
        sample: &EventSample,
        duration: f64,
        active: &[bool],
        seed: u64,
        stream: u64,
    ) -> Result<GraphState, TrainError> {
        let mp = &self.cfg.model;
        match &self.backend {
            Backend::Software => Ok(GraphState::simulate(&sample.events, duration, &upload.effective, mp, Some(active))?),
            Backend::Substrate(s) => {
                let opts = EmulateOptions { record_traces: true, inter_sample_reset: true, seed, stream };
                let rec = s.emulate(&sample.events, duration, &opts)?;
                Ok(GraphState::assemble(&rec, &sample.events, &upload.effective, mp, s.trace_norm(), Some(active))?)
            }
        }
    }

    /// Inference pass: normalized readout traces on the sampling grid and the
    /// number of hidden spikes.
    fn infer(
        &self,
        upload: &Upload,
        sample: &EventSample,
        duration: f64,
        active: &[bool],
        seed: u64,
        stream: u64,
    ) -> Result<(Matrix, f64), TrainError> {
        match &self.backend {
            Backend::Software => {
                let gs = self.forward(upload, sample, duration, active, seed, stream)?;
                let k = self.cfg.model.interp_factor;
                let traces = Matrix::from_fn(gs.v_out.rows() / k, gs.v_out.cols(), |t, o| gs.v_out.get(t * k, o));
                Ok((traces, gs.s_hidden.sum()))
            }
            Backend::Substrate(s) => {
                let opts = EmulateOptions { record_traces: false, inter_sample_reset: true, seed, stream };
                let rec = s.emulate(&sample.events, duration, &opts)?;
                let norm = s.trace_norm();
                Ok((rec.output_traces.map(|v| norm.apply(v)), rec.hidden_spikes.len() as f64))
            }
        }
    }

    /// Forward and backward over `batch`; returns summed gradients, loss,
    /// correct count and hidden spikes.
    fn reduce_batch(
        &self,
        upload: &Upload,
        data: &dyn SampleSource,
        batch: &[usize],
        active: &[bool],
        emu_seed: u64,
        augment: bool,
    ) -> Result<(Gradients, f64, usize, f64), TrainError> {
        let cfg = &self.cfg;
        let epoch = self.epoch;
        let duration = data.duration();
        let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
        let results = exec::map_indexed(chunks.len(), |c| {
            let mut res = ChunkResult::default();
            for &idx in chunks[c] {
                let key = augment.then(|| rng::mix(&[cfg.seed, epoch as u64, idx as u64]));
                let sample = data.sample(idx, key);
                let step = self.forward(upload, &sample, duration, active, emu_seed, idx as u64).and_then(|gs| {
                    let terms = objective::combined(&cfg.loss, &gs.v_out, &gs.s_hidden, sample.label)?;
                    let seeds = Seeds { d_v_out: terms.d_traces.clone(), d_s_hidden: terms.d_spikes.clone() };
                    let g = gs.backward(&seeds)?;
                    let (z, _) = objective::logits(&gs.v_out, cfg.loss.mode, gs.steps());
                    Ok((g, terms.total(), objective::argmax(&z) == sample.label, gs.s_hidden.sum()))
                });
                match step {
                    Ok((g, l, ok, s)) => {
                        match res.grads.as_mut() {
                            Some(acc) => acc.axpy(1.0, &g),
                            None => res.grads = Some(g),
                        }
                        res.loss += l;
                        res.correct += ok as usize;
                        res.spikes += s;
                    }
                    Err(e) => {
                        res.error = Some(e);
                        break;
                    }
                }
            }
            res
        });
        let (mut loss, mut correct, mut spikes) = (0.0, 0usize, 0.0);
        let mut total: Option<Gradients> = None;
        for r in results {
            if let Some(e) = r.error {
                return Err(e);
            }
            loss += r.loss;
            correct += r.correct;
            spikes += r.spikes;
            if let Some(g) = r.grads {
                match total.as_mut() {
                    Some(t) => t.axpy(1.0, &g),
                    None => total = Some(g),
                }
            }
        }
        let grads = total.ok_or_else(|| TrainError::Config("empty batch".into()))?;
        Ok((grads, loss, correct, spikes))
    }

    /// Mean loss gradient over the clean samples `batch` at the current
    /// weights, without dropout and without updating anything.
    pub fn batch_gradients(&mut self, data: &dyn SampleSource, batch: &[usize]) -> Result<Gradients, TrainError> {
        let silenced = self.silenced.clone();
        self.set_mask(&silenced)?;
        let upload = self.upload(1.0)?;
        let active: Vec<bool> = silenced.iter().map(|s| !s).collect();
        let emu_seed = rng::mix(&[self.cfg.seed, self.epoch as u64]);
        let (mut g, ..) = self.reduce_batch(&upload, data, batch, &active, emu_seed, false)?;
        g.scale(1.0 / batch.len() as f64);
        if let Some(r) = g.d_w_rec.as_mut() {
            for j in 0..r.rows() {
                r.set(j, j, 0.0);
            }
        }
        Ok(g)
    }

    /// One epoch over `data` in shuffled mini-batches.
    pub fn train_epoch(&mut self, data: &dyn SampleSource, augment: bool) -> Result<EpochStats, TrainError> {
        let epoch = self.epoch;
        let cfg = self.cfg.clone();
        let eta = lr_schedule(cfg.eta, cfg.gamma_eta, epoch)?;
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, domain::SHUFFLE, epoch as u64));
        let emu_seed = rng::mix(&[cfg.seed, epoch as u64]);
        let (mut loss_sum, mut correct, mut spikes) = (0.0, 0usize, 0.0);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut active: Vec<bool> = self.silenced.iter().map(|s| !s).collect();
            let mut out_gain = 1.0;
            if cfg.dropout_p > 0.0 {
                let mut rng = rng::stream(cfg.seed, domain::DROPOUT, ((epoch as u64) << 32) | b as u64);
                for a in active.iter_mut() {
                    if rng.random::<f64>() < cfg.dropout_p {
                        *a = false;
                    }
                }
                out_gain = 1.0 / (1.0 - cfg.dropout_p);
            }
            let mask: Vec<bool> = active.iter().map(|a| !a).collect();
            self.set_mask(&mask)?;
            let upload = self.upload(out_gain)?;
            let reduced = self.reduce_batch(&upload, data, batch, &active, emu_seed, augment);
            let (mut grads, batch_loss, batch_correct, batch_spikes) = match reduced {
                Ok(r) => r,
                Err(e) => {
                    self.set_mask(&self.silenced.clone())?;
                    return Err(e);
                }
            };
            loss_sum += batch_loss;
            correct += batch_correct;
            spikes += batch_spikes;
            grads.scale(1.0 / batch.len() as f64);
            grads.d_w_out.scale(upload.out_gain);
            if let Some(r) = grads.d_w_rec.as_mut() {
                r.scale(upload.out_gain);
                for j in 0..r.rows() {
                    r.set(j, j, 0.0);
                }
            }
            adam_step(&mut self.weights, &grads, &mut self.opt, eta)?;
        }
        let silenced = self.silenced.clone();
        self.set_mask(&silenced)?;
        self.epoch += 1;
        Ok(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            mean_train_spikes: spikes / n as f64,
            eta,
        })
    }

    /// Accuracy with logits restricted to `[0, restrict]` µs (full window when `None`).
    pub fn evaluate(&mut self, data: &dyn SampleSource, restrict: Option<f64>) -> Result<EvalStats, TrainError> {
        let limit = restrict.unwrap_or(f64::INFINITY);
        let (acc, spikes) = self.evaluate_curve(data, &[limit])?;
        Ok(EvalStats { accuracy: acc[0], mean_hidden_spikes: spikes, samples: data.len() })
    }

    /// Accuracy for each restriction window in `limits` (µs) from a single
    /// pass over the data, plus mean hidden spikes per sample.
    pub fn evaluate_curve(&mut self, data: &dyn SampleSource, limits: &[f64]) -> Result<(Vec<f64>, f64), TrainError> {
        let silenced = self.silenced.clone();
        self.set_mask(&silenced)?;
        let upload = self.upload(1.0)?;
        let active: Vec<bool> = silenced.iter().map(|s| !s).collect();
        let duration = data.duration();
        let dt = self.cfg.model.dt;
        let steps = steps_for(duration, dt);
        let rows: Vec<usize> = limits
            .iter()
            .map(|&l| if l.is_finite() { ((l / dt + 1e-9).floor().max(0.0) as usize + 1).min(steps) } else { steps })
            .collect();
        let mode = self.cfg.loss.mode;
        let seed = rng::mix(&[self.cfg.seed, domain::EVAL]);
        let n = data.len();
        let this = &*self;
        let chunks = n.div_ceil(CHUNK);
        let results = exec::map_indexed(chunks, |c| -> Result<(Vec<usize>, f64), TrainError> {
            let mut hits = vec![0usize; rows.len()];
            let mut spikes = 0.0;
            for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let sample = data.sample(idx, None);
                let (traces, n_spikes) = this.infer(&upload, &sample, duration, &active, seed, idx as u64)?;
                for (h, &r) in hits.iter_mut().zip(&rows) {
                    let (z, _) = objective::logits(&traces, mode, r);
                    *h += (objective::argmax(&z) == sample.label) as usize;
                }
                spikes += n_spikes;
            }
            Ok((hits, spikes))
        });
        let mut hits = vec![0usize; rows.len()];
        let mut spikes = 0.0;
        for r in results {
            let (h, s) = r?;
            hits.iter_mut().zip(h).for_each(|(a, b)| *a += b);
            spikes += s;
        }
        let denom = n.max(1) as f64;
        Ok((hits.into_iter().map(|h| h as f64 / denom).collect(), spikes / denom))
    }
}
