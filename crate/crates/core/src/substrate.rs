//! Virtual analog substrate.
//!
//! Leaky integrate-and-fire neurons with exponentially decaying synaptic
//! currents, per-neuron parameter mismatch, membrane noise, signed integer
//! synapses and a membrane sampler on the `dt_sample` grid. Membrane values
//! are in normalized units (leak 0, threshold 1 at the calibration targets).

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::network::{bin_index, steps_for, Spike, Topology};
use crate::rng::{self, domain};

#[derive(Debug, Error, PartialEq)]
pub enum SubstrateError {
    #[error("fan-in of {layer} layer is {fan_in}, exceeds the limit of {limit}")]
    FanIn { layer: &'static str, fan_in: usize, limit: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),
    #[error("{name} weights have shape {actual:?}, expected {expected:?}")]
    Shape { name: &'static str, expected: (usize, usize), actual: (usize, usize) },
    #[error("{name} weight {value} outside [-{max}, {max}]")]
    Range { name: &'static str, value: i16, max: i16 },
    #[error("recurrent topology requires a recurrent weight matrix")]
    MissingRecurrent,
    #[error("recurrent weights given for a feed-forward topology")]
    UnexpectedRecurrent,
    #[error("mask has length {actual}, expected {expected}")]
    MaskLength { expected: usize, actual: usize },
    #[error("input event (channel {channel}, t = {time} µs) outside {n_in} channels / [0, {duration}) µs")]
    EventOutOfRange { channel: usize, time: f64, n_in: usize, duration: f64 },
}

/// Analog parameters of one neuron circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronParams {
    /// Membrane time constant C/g_leak, µs.
    pub tau_m: f64,
    /// Synaptic time constant, µs.
    pub tau_s: f64,
    pub v_leak: f64,
    pub v_thresh: f64,
    pub v_reset: f64,
    /// Membrane noise density, units per sqrt(µs).
    pub noise_sigma: f64,
    pub is_spiking: bool,
}

impl NeuronParams {
    /// Calibration targets for the feed-forward image task.
    pub fn mnist() -> Self {
        Self {
            tau_m: 5.7,
            tau_s: 6.0,
            v_leak: 0.0,
            v_thresh: 1.0,
            v_reset: 0.0,
            noise_sigma: 0.02,
            is_spiking: true,
        }
    }

    /// Calibration targets for the recurrent speech task.
    pub fn shd() -> Self {
        Self { tau_m: 10.0, tau_s: 10.0, ..Self::mnist() }
    }

    pub fn readout(&self) -> Self {
        Self { is_spiking: false, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        let bad = |m: String| Err(SubstrateError::InvalidParams(m));
        if !(self.tau_m > 0.0 && self.tau_m.is_finite()) {
            return bad(format!("tau_m = {} must be positive", self.tau_m));
        }
        if !(self.tau_s > 0.0 && self.tau_s.is_finite()) {
            return bad(format!("tau_s = {} must be positive", self.tau_s));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma = {} must be non-negative", self.noise_sigma));
        }
        if self.is_spiking && !(self.v_thresh > self.v_leak) {
            return bad(format!(
                "threshold {} must lie above the leak potential {}",
                self.v_thresh, self.v_leak
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubstrateConfig {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub recurrent: bool,
    /// Membrane sampling interval, µs.
    pub dt_sample: f64,
    /// Integration substeps per sampling interval.
    pub substeps: usize,
    pub fan_in_limit: usize,
    pub weight_max: i16,
    /// Refractory period after a spike, µs.
    pub refractory: f64,
    /// Standard deviation of additive noise on sampled membrane values.
    pub readout_noise: f64,
    pub seed: u64,
}

impl Default for SubstrateConfig {
    fn default() -> Self {
        Self {
            n_in: 256,
            n_hidden: 246,
            n_out: 10,
            recurrent: false,
            dt_sample: 1.7,
            substeps: 10,
            fan_in_limit: 256,
            weight_max: 63,
            refractory: 0.0,
            readout_noise: 0.01,
            seed: 0,
        }
    }
}

impl SubstrateConfig {
    pub fn topology(&self) -> Topology {
        Topology {
            n_in: self.n_in,
            n_hidden: self.n_hidden,
            n_out: self.n_out,
            recurrent: self.recurrent,
        }
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        if self.n_hidden == 0 || self.n_out == 0 || self.n_in == 0 {
            return Err(SubstrateError::InvalidConfig("layer sizes must be non-zero".into()));
        }
        if !(self.dt_sample > 0.0) || self.substeps == 0 {
            return Err(SubstrateError::InvalidConfig(
                "dt_sample and substeps must be positive".into(),
            ));
        }
        if self.weight_max <= 0 {
            return Err(SubstrateError::InvalidConfig("weight_max must be positive".into()));
        }
        if !(self.refractory >= 0.0) || !(self.readout_noise >= 0.0) {
            return Err(SubstrateError::InvalidConfig(
                "refractory and readout_noise must be non-negative".into(),
            ));
        }
        let hidden_fan_in = self.n_in + if self.recurrent { self.n_hidden } else { 0 };
        if hidden_fan_in > self.fan_in_limit {
            return Err(SubstrateError::FanIn {
                layer: "hidden",
                fan_in: hidden_fan_in,
                limit: self.fan_in_limit,
            });
        }
        if self.n_hidden > self.fan_in_limit {
            return Err(SubstrateError::FanIn {
                layer: "output",
                fan_in: self.n_hidden,
                limit: self.fan_in_limit,
            });
        }
        Ok(())
    }

    /// Internal integration step, µs.
    pub fn substep(&self) -> f64 {
        self.dt_sample / self.substeps as f64
    }
}

/// Signed integer synapse matrix; `values[i] * scale` is the represented weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeights {
    rows: usize,
    cols: usize,
    values: Vec<i16>,
    pub scale: f64,
}

impl QuantizedWeights {
    pub fn new(rows: usize, cols: usize, values: Vec<i16>, scale: f64) -> Self {
        assert_eq!(values.len(), rows * cols, "quantized data length mismatch");
        Self { rows, cols, values, scale }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0; rows * cols], 1.0)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> i16 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.values.iter().map(|&q| q as f64 * self.scale).collect(),
        )
    }

    fn check(&self, name: &'static str, expected: (usize, usize), max: i16) -> Result<(), SubstrateError> {
        if self.shape() != expected {
            return Err(SubstrateError::Shape { name, expected, actual: self.shape() });
        }
        if let Some(&value) = self.values.iter().find(|q| q.abs() > max) {
            return Err(SubstrateError::Range { name, value, max });
        }
        if !self.scale.is_finite() {
            return Err(SubstrateError::InvalidConfig(format!("{name} scale is not finite")));
        }
        Ok(())
    }
}

/// Parameter groups that can be detuned independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Membrane and synaptic time constants.
    TimeConstants,
    /// Distance between threshold and leak potential (leak held fixed).
    ThresholdGap,
}

/// Dynamic state of all neurons; used to chain emulations without reset.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub v_hidden: Vec<f64>,
    pub i_hidden: Vec<f64>,
    pub v_out: Vec<f64>,
    pub i_out: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EmulateOptions {
    /// Record hidden membrane traces. Readout traces are always recorded.
    pub record_traces: bool,
    /// Clamp membranes to leak and currents to zero at t = 0.
    pub inter_sample_reset: bool,
    pub seed: u64,
    /// Index of the noise stream (typically the sample index).
    pub stream: u64,
}

impl Default for EmulateOptions {
    fn default() -> Self {
        Self { record_traces: true, inter_sample_reset: true, seed: 0, stream: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmulationRecord {
    pub input_spikes: Vec<Spike>,
    pub hidden_spikes: Vec<Spike>,
    /// Empty: readout units do not spike.
    pub output_spikes: Vec<Spike>,
    /// `steps x n_hidden`, empty when traces were not requested.
    pub hidden_traces: Matrix,
    /// `steps x n_out`.
    pub output_traces: Matrix,
    pub duration: f64,
    pub dt_sample: f64,
}

impl EmulationRecord {
    pub fn steps(&self) -> usize {
        self.output_traces.rows()
    }

    pub fn hidden_spike_count(&self) -> usize {
        self.hidden_spikes.len()
    }
}

/// Emulated neuromorphic core.
#[derive(Clone, Debug)]
pub struct Substrate {
    config: SubstrateConfig,
    targets: NeuronParams,
    hidden: Vec<NeuronParams>,
    readout: Vec<NeuronParams>,
    w_in: Matrix,
    w_rec: Option<Matrix>,
    w_out: Matrix,
    silenced: Vec<bool>,
}

impl Substrate {
    /// Brings up a substrate whose neurons sit exactly on their calibration
    /// targets, with all weights zero and every neuron at rest.
    pub fn build(config: SubstrateConfig, targets: NeuronParams) -> Result<Self, SubstrateError> {
        config.validate()?;
        targets.validate()?;
        let targets = NeuronParams { is_spiking: true, ..targets };
        let hidden = vec![targets.clone(); config.n_hidden];
        let readout = vec![targets.readout(); config.n_out];
        Ok(Self {
            w_in: Matrix::zeros(config.n_in, config.n_hidden),
            w_rec: config.recurrent.then(|| Matrix::zeros(config.n_hidden, config.n_hidden)),
            w_out: Matrix::zeros(config.n_hidden, config.n_out),
            silenced: vec![false; config.n_hidden],
            config,
            targets,
            hidden,
            readout,
        })
    }

    pub fn config(&self) -> &SubstrateConfig {
        &self.config
    }

    pub fn targets(&self) -> &NeuronParams {
        &self.targets
    }

    pub fn hidden_params(&self) -> &[NeuronParams] {
        &self.hidden
    }

    pub fn readout_params(&self) -> &[NeuronParams] {
        &self.readout
    }

    /// Mutable access to individual circuits, e.g. to model a single faulty neuron.
    pub fn hidden_params_mut(&mut self) -> &mut [NeuronParams] {
        &mut self.hidden
    }

    /// Hidden neurons whose threshold does not lie above their leak potential.
    pub fn pathological(&self) -> Vec<bool> {
        self.hidden.iter().map(|p| p.v_thresh <= p.v_leak).collect()
    }

    /// Redraws each neuron's parameters in `groups` from
    /// Normal(target, sigma_d * target).
    pub fn decalibrate(
        &self,
        sigma_d: f64,
        groups: &[ParamGroup],
        seed: u64,
    ) -> Result<Self, SubstrateError> {
        if !(sigma_d >= 0.0) || !sigma_d.is_finite() {
            return Err(SubstrateError::InvalidConfig(format!("sigma_d = {sigma_d} must be >= 0")));
        }
        if groups.is_empty() {
            return Err(SubstrateError::InvalidConfig("no parameter group selected".into()));
        }
        let mut out = self.clone();
        let t = &self.targets;
        let gap = t.v_thresh - t.v_leak;
        let mut rng = rng::stream(seed, domain::DECALIBRATION, 0);
        let positive = |rng: &mut rng::StreamRng, mean: f64| -> f64 {
            let dist = Normal::new(mean, sigma_d * mean).expect("finite spread");
            loop {
                let x: f64 = dist.sample(rng);
                if x > 0.0 {
                    return x;
                }
            }
        };
        let detune_tau = groups.contains(&ParamGroup::TimeConstants);
        let detune_gap = groups.contains(&ParamGroup::ThresholdGap);
        for p in out.hidden.iter_mut() {
            if detune_tau {
                p.tau_m = positive(&mut rng, t.tau_m);
                p.tau_s = positive(&mut rng, t.tau_s);
            }
            if detune_gap {
                let z: f64 = StandardNormal.sample(&mut rng);
                p.v_thresh = p.v_leak + gap * (1.0 + sigma_d * z);
            }
        }
        if detune_tau {
            for p in out.readout.iter_mut() {
                p.tau_m = positive(&mut rng, t.tau_m);
                p.tau_s = positive(&mut rng, t.tau_s);
            }
        }
        Ok(out)
    }

    /// Uploads quantized weights. The diagonal of the recurrent matrix is
    /// forced to zero (no self-connections).
    pub fn set_weights(
        &mut self,
        w_in: &QuantizedWeights,
        w_rec: Option<&QuantizedWeights>,
        w_out: &QuantizedWeights,
    ) -> Result<(), SubstrateError> {
        let c = &self.config;
        let max = c.weight_max;
        w_in.check("input", (c.n_in, c.n_hidden), max)?;
        w_out.check("output", (c.n_hidden, c.n_out), max)?;
        let rec = match (c.recurrent, w_rec) {
            (true, Some(w)) => {
                w.check("recurrent", (c.n_hidden, c.n_hidden), max)?;
                let mut m = w.dequantize();
                for j in 0..c.n_hidden {
                    m.set(j, j, 0.0);
                }
                Some(m)
            }
            (true, None) => return Err(SubstrateError::MissingRecurrent),
            (false, Some(_)) => return Err(SubstrateError::UnexpectedRecurrent),
            (false, None) => None,
        };
        self.w_in = w_in.dequantize();
        self.w_rec = rec;
        self.w_out = w_out.dequantize();
        Ok(())
    }

    /// Currently effective real-valued weights.
    pub fn effective_weights(&self) -> (&Matrix, Option<&Matrix>, &Matrix) {
        (&self.w_in, self.w_rec.as_ref(), &self.w_out)
    }

    /// Silences the flagged hidden neurons: they never spike and therefore
    /// inject no current downstream. Passing an all-false mask restores them.
    pub fn silence(&mut self, mask: &[bool]) -> Result<(), SubstrateError> {
        if mask.len() != self.config.n_hidden {
            return Err(SubstrateError::MaskLength {
                expected: self.config.n_hidden,
                actual: mask.len(),
            });
        }
        self.silenced.copy_from_slice(mask);
        Ok(())
    }

    pub fn silenced(&self) -> &[bool] {
        &self.silenced
    }

    pub fn rest_state(&self) -> NeuronState {
        NeuronState {
            v_hidden: self.hidden.iter().map(|p| p.v_leak).collect(),
            i_hidden: vec![0.0; self.config.n_hidden],
            v_out: self.readout.iter().map(|p| p.v_leak).collect(),
            i_out: vec![0.0; self.config.n_out],
        }
    }

    /// Emulates one stimulus starting from rest.
    pub fn emulate(
        &self,
        inputs: &[Spike],
        duration: f64,
        opts: &EmulateOptions,
    ) -> Result<EmulationRecord, SubstrateError> {
        self.emulate_from(inputs, duration, opts, None).map(|(rec, _)| rec)
    }

    /// Emulates one stimulus, optionally continuing from a previous state
    /// (ignored when `inter_sample_reset` is set). Returns the final state.
    pub fn emulate_from(
        &self,
        inputs: &[Spike],
        duration: f64,
        opts: &EmulateOptions,
        initial: Option<&NeuronState>,
    ) -> Result<(EmulationRecord, NeuronState), SubstrateError> {
        let c = &self.config;
        for ev in inputs {
            if ev.unit >= c.n_in || !(ev.time >= 0.0) || !(ev.time < duration) {
                return Err(SubstrateError::EventOutOfRange {
                    channel: ev.unit,
                    time: ev.time,
                    n_in: c.n_in,
                    duration,
                });
            }
        }
        let n_h = c.n_hidden;
        let n_o = c.n_out;
        let dt = c.dt_sample;
        let sub = c.substeps;
        let delta = c.substep();
        let gain = delta / dt;
        let steps = steps_for(duration, dt);
        let total = steps * sub;

        // Input events grouped per substep.
        let mut queue: Vec<(usize, usize)> =
            inputs.iter().map(|e| (bin_index(e.time, delta), e.unit)).collect();
        queue.sort_unstable();

        let decay = |tau: f64| (-delta / tau).exp();
        let am_h: Vec<f64> = self.hidden.iter().map(|p| decay(p.tau_m)).collect();
        let as_h: Vec<f64> = self.hidden.iter().map(|p| decay(p.tau_s)).collect();
        let am_o: Vec<f64> = self.readout.iter().map(|p| decay(p.tau_m)).collect();
        let as_o: Vec<f64> = self.readout.iter().map(|p| decay(p.tau_s)).collect();
        let sq = delta.sqrt();
        let noise_h: Vec<f64> = self.hidden.iter().map(|p| p.noise_sigma * sq).collect();
        let noise_o: Vec<f64> = self.readout.iter().map(|p| p.noise_sigma * sq).collect();
        let any_noise = noise_h.iter().chain(&noise_o).any(|&s| s > 0.0);
        let refractory_steps = (c.refractory / delta).round() as usize;

        let mut state = match (initial, opts.inter_sample_reset) {
            (Some(s), false) => s.clone(),
            _ => self.rest_state(),
        };
        let NeuronState { v_hidden: ref mut vh, i_hidden: ref mut ih, v_out: ref mut vo, i_out: ref mut io } =
            state;
        let mut refractory = vec![0usize; n_h];

        // Separate streams keep each recorded quantity independent of what
        // else is recorded.
        let mut rng = rng::stream(opts.seed, domain::EMULATION, opts.stream);
        let mut rng_rh = rng::stream(opts.seed, domain::READOUT_HIDDEN, opts.stream);
        let mut rng_ro = rng::stream(opts.seed, domain::READOUT_OUTPUT, opts.stream);
        let mut hidden_traces =
            if opts.record_traces { Matrix::zeros(steps, n_h) } else { Matrix::zeros(0, n_h) };
        let mut output_traces = Matrix::zeros(steps, n_o);
        let mut hidden_spikes = Vec::new();
        let mut fired: Vec<usize> = Vec::with_capacity(n_h);
        let mut q = 0usize;

        for k in 0..total {
            if k % sub == 0 {
                let row = k / sub;
                let ro = c.readout_noise;
                if opts.record_traces {
                    let dst = hidden_traces.row_mut(row);
                    for j in 0..n_h {
                        let n = if ro > 0.0 { ro * rng_rh.sample::<f64, _>(StandardNormal) } else { 0.0 };
                        dst[j] = vh[j] + n;
                    }
                }
                let dst = output_traces.row_mut(row);
                for o in 0..n_o {
                    let n = if ro > 0.0 { ro * rng_ro.sample::<f64, _>(StandardNormal) } else { 0.0 };
                    dst[o] = vo[o] + n;
                }
            }

            // Threshold detection at the substep boundary.
            fired.clear();
            let t_now = k as f64 * delta;
            for j in 0..n_h {
                let p = &self.hidden[j];
                if refractory[j] > 0 {
                    refractory[j] -= 1;
                    vh[j] = p.v_reset;
                    continue;
                }
                if !self.silenced[j] && vh[j] >= p.v_thresh {
                    fired.push(j);
                    hidden_spikes.push(Spike::new(j, t_now));
                    vh[j] = p.v_reset;
                    refractory[j] = refractory_steps;
                }
            }

            // Membrane integration with the current of this substep.
            for j in 0..n_h {
                let p = &self.hidden[j];
                let mut v = p.v_leak + am_h[j] * (vh[j] - p.v_leak) + gain * ih[j];
                if any_noise && noise_h[j] > 0.0 {
                    v += noise_h[j] * rng.sample::<f64, _>(StandardNormal);
                }
                vh[j] = v;
            }
            for o in 0..n_o {
                let p = &self.readout[o];
                let mut v = p.v_leak + am_o[o] * (vo[o] - p.v_leak) + gain * io[o];
                if any_noise && noise_o[o] > 0.0 {
                    v += noise_o[o] * rng.sample::<f64, _>(StandardNormal);
                }
                vo[o] = v;
            }

            // Synaptic currents: decay, then events of this substep.
            for j in 0..n_h {
                ih[j] *= as_h[j];
            }
            for o in 0..n_o {
                io[o] *= as_o[o];
            }
            while q < queue.len() && queue[q].0 == k {
                let w = self.w_in.row(queue[q].1);
                for (i, w) in ih.iter_mut().zip(w) {
                    *i += w;
                }
                q += 1;
            }
            for &j in &fired {
                if let Some(w_rec) = &self.w_rec {
                    for (i, w) in ih.iter_mut().zip(w_rec.row(j)) {
                        *i += w;
                    }
                }
                for (i, w) in io.iter_mut().zip(self.w_out.row(j)) {
                    *i += w;
                }
            }
        }
        hidden_spikes.retain(|s| s.time < duration);

        let mut input_spikes = inputs.to_vec();
        input_spikes.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.unit.cmp(&b.unit)));
        let record = EmulationRecord {
            input_spikes,
            hidden_spikes,
            output_spikes: Vec::new(),
            hidden_traces,
            output_traces,
            duration,
            dt_sample: dt,
        };
        Ok((record, state))
    }

    /// Streams several stimuli back to back, each occupying `spacing` µs.
    /// Without `inter_sample_reset` the state carries over between stimuli.
    pub fn emulate_sequence(
        &self,
        stimuli: &[Vec<Spike>],
        spacing: f64,
        opts: &EmulateOptions,
    ) -> Result<Vec<EmulationRecord>, SubstrateError> {
        let mut state = self.rest_state();
        let mut out = Vec::with_capacity(stimuli.len());
        for (i, inputs) in stimuli.iter().enumerate() {
            let o = EmulateOptions { stream: opts.stream.wrapping_add(i as u64), ..*opts };
            let (rec, next) = self.emulate_from(inputs, spacing, &o, Some(&state))?;
            state = next;
            out.push(rec);
        }
        Ok(out)
    }
}

impl Substrate {
    /// Normalization of raw samples against the calibration targets.
    pub fn trace_norm(&self) -> crate::graph::TraceNorm {
        crate::graph::TraceNorm { v_leak: self.targets.v_leak, v_thresh: self.targets.v_thresh }
    }
}
