//! Differentiable LIF graph on the sampling grid.
//!
//! The graph re-simulates the network with idealized homogeneous dynamics
//! but, wherever the substrate provided a measurement, the forward value is
//! the measurement itself. Each such node is an identity `f(x, x̃) = x` whose
//! derivative is routed entirely through the estimate slot `x̃`. Spikes are
//! likewise taken from the recording, with the surrogate derivative evaluated
//! at the measured membrane value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::network::{bin_index, steps_for, NetworkWeights, Spike};
use crate::substrate::EmulationRecord;

/// Firing threshold in normalized units.
pub const THRESHOLD: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("record has {actual} trace rows, expected {expected}")]
    TraceLength { expected: usize, actual: usize },
    #[error("record carries no hidden membrane traces")]
    MissingTraces,
    #[error("{kind} spike of unit {unit} at t = {time} µs lies outside [0, {duration}) µs")]
    SpikeOutOfRange { kind: &'static str, unit: usize, time: f64, duration: f64 },
    #[error("weights do not match the recorded topology: {0}")]
    Shape(String),
    #[error("non-finite adjoint at time step {step}")]
    NonFinite { step: usize },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
}

/// Homogeneous neuron model assumed by the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub tau_m: f64,
    pub tau_s: f64,
    /// Surrogate steepness.
    pub beta: f64,
    /// Sampling interval of the recorded traces, µs.
    pub dt: f64,
    /// Graph steps per sampling interval.
    pub interp_factor: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::mnist()
    }
}

impl ModelParams {
    pub fn mnist() -> Self {
        Self { tau_m: 6.0, tau_s: 6.0, beta: 50.0, dt: 1.7, interp_factor: 1 }
    }

    pub fn shd() -> Self {
        Self { tau_m: 10.0, tau_s: 10.0, ..Self::mnist() }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let ok = self.tau_m > 0.0 && self.tau_s > 0.0 && self.dt > 0.0 && self.beta > 0.0;
        if !ok || self.interp_factor == 0 {
            return Err(GraphError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }

    /// Width of one graph step, µs.
    pub fn grid_dt(&self) -> f64 {
        self.dt / self.interp_factor as f64
    }

    pub fn alpha(&self) -> f64 {
        (-self.grid_dt() / self.tau_m).exp()
    }

    pub fn beta_s(&self) -> f64 {
        (-self.grid_dt() / self.tau_s).exp()
    }

    /// Current-to-membrane gain per graph step. Currents are expressed as
    /// membrane increments per sampling interval, so a refined grid
    /// integrates them in proportionally smaller pieces.
    pub fn gain(&self) -> f64 {
        1.0 / self.interp_factor as f64
    }
}

/// Surrogate derivative of the spike nonlinearity, `(β|v − ϑ| + 1)^-2`.
#[inline]
pub fn surrogate_grad(v: f64, mp: &ModelParams) -> f64 {
    let d = mp.beta * (v - THRESHOLD).abs() + 1.0;
    1.0 / (d * d)
}

/// Maps raw membrane samples to normalized units using calibration targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceNorm {
    pub v_leak: f64,
    pub v_thresh: f64,
}

impl TraceNorm {
    pub const IDENTITY: TraceNorm = TraceNorm { v_leak: 0.0, v_thresh: 1.0 };

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.v_leak) / (self.v_thresh - self.v_leak)
    }
}

/// Unrolled graph for one sample.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub mp: ModelParams,
    /// Active input channels per graph step (collisions merged).
    pub input_bins: Vec<Vec<usize>>,
    /// Hidden spikes S̃, `steps x n_hidden`, entries in {0, 1}.
    pub s_hidden: Matrix,
    /// Membrane values used in the forward pass (measurements when injected).
    pub v_hidden: Matrix,
    pub v_out: Matrix,
    /// Pre-injection estimates, i.e. the `x̃` slot of each identity node.
    pub v_hidden_est: Matrix,
    pub v_out_est: Matrix,
    /// Estimated synaptic currents Ĩ.
    pub i_hidden: Matrix,
    pub i_out: Matrix,
    pub weights: NetworkWeights,
    /// Hidden units that may spike (false for dropped or silenced units).
    pub active: Vec<bool>,
}

/// Adjoints seeded by the objective.
#[derive(Clone, Debug)]
pub struct Seeds {
    /// dL/dṼ_out, `steps x n_out`.
    pub d_v_out: Matrix,
    /// dL/dS̃_hidden, `steps x n_hidden`.
    pub d_s_hidden: Matrix,
}

impl Seeds {
    pub fn zeros(gs: &GraphState) -> Self {
        Self {
            d_v_out: Matrix::zeros(gs.steps(), gs.n_out()),
            d_s_hidden: Matrix::zeros(gs.steps(), gs.n_hidden()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub d_w_in: Matrix,
    pub d_w_rec: Option<Matrix>,
    pub d_w_out: Matrix,
}

impl Gradients {
    pub fn zeros_like(w: &NetworkWeights) -> Self {
        Self {
            d_w_in: Matrix::zeros(w.w_in.rows(), w.w_in.cols()),
            d_w_rec: w.w_rec.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            d_w_out: Matrix::zeros(w.w_out.rows(), w.w_out.cols()),
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.d_w_in)
            .chain(self.d_w_rec.as_ref())
            .chain(std::iter::once(&self.d_w_out))
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        std::iter::once(&mut self.d_w_in)
            .chain(self.d_w_rec.as_mut())
            .chain(std::iter::once(&mut self.d_w_out))
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Gradients) {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            a.axpy(k, b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.matrices_mut().for_each(|m| m.scale(k));
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Matrix::is_finite)
    }
}

fn bin_inputs(inputs: &[Spike], steps: usize, width: f64, duration: f64) -> Result<Vec<Vec<usize>>, GraphError> {
    let mut bins = vec![Vec::new(); steps];
    for s in inputs {
        let b = bin_index(s.time, width);
        if !(s.time >= 0.0) || s.time >= duration || b >= steps {
            return Err(GraphError::SpikeOutOfRange { kind: "input", unit: s.unit, time: s.time, duration });
        }
        bins[b].push(s.unit);
    }
    for b in bins.iter_mut() {
        b.sort_unstable();
        b.dedup();
    }
    Ok(bins)
}

/// Linear interpolation of `src` rows onto a grid `factor` times finer; the
/// last sample is held.
fn interpolate(src: &Matrix, factor: usize, norm: TraceNorm) -> Matrix {
    let (rows, cols) = src.shape();
    let mut out = Matrix::zeros(rows * factor, cols);
    for t in 0..rows {
        let next = if t + 1 < rows { t + 1 } else { t };
        for r in 0..factor {
            let w = r as f64 / factor as f64;
            let dst = out.row_mut(t * factor + r);
            for c in 0..cols {
                let a = norm.apply(src.get(t, c));
                let b = norm.apply(src.get(next, c));
                dst[c] = if r == 0 { a } else { a + w * (b - a) };
            }
        }
    }
    out
}

fn threshold_row(spikes: &mut Matrix, v: &Matrix, active: &[bool], t: usize) {
    for j in 0..spikes.cols() {
        let s = active[j] && v.get(t, j) >= THRESHOLD;
        spikes.set(t, j, if s { 1.0 } else { 0.0 });
    }
}

impl GraphState {
    pub fn steps(&self) -> usize {
        self.s_hidden.rows()
    }

    pub fn n_hidden(&self) -> usize {
        self.s_hidden.cols()
    }

    pub fn n_out(&self) -> usize {
        self.v_out.cols()
    }

    /// Spike count per hidden neuron.
    pub fn spike_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_hidden()];
        for t in 0..self.steps() {
            for (c, s) in counts.iter_mut().zip(self.s_hidden.row(t)) {
                *c += s;
            }
        }
        counts
    }

    fn empty(weights: &NetworkWeights, mp: &ModelParams, steps: usize, active: Vec<bool>) -> Self {
        let topo = weights.topology();
        let (h, o) = (topo.n_hidden, topo.n_out);
        Self {
            mp: mp.clone(),
            input_bins: vec![Vec::new(); steps],
            s_hidden: Matrix::zeros(steps, h),
            v_hidden: Matrix::zeros(steps, h),
            v_out: Matrix::zeros(steps, o),
            v_hidden_est: Matrix::zeros(steps, h),
            v_out_est: Matrix::zeros(steps, o),
            i_hidden: Matrix::zeros(steps, h),
            i_out: Matrix::zeros(steps, o),
            weights: weights.clone(),
            active,
        }
    }

    /// Builds the graph from a substrate recording, injecting the measured
    /// (normalized) traces and spikes.
    pub fn assemble(
        record: &EmulationRecord,
        inputs: &[Spike],
        weights: &NetworkWeights,
        mp: &ModelParams,
        norm: TraceNorm,
        active: Option<&[bool]>,
    ) -> Result<Self, GraphError> {
        mp.validate()?;
        let topo = weights.topology();
        let rows = steps_for(record.duration, mp.dt);
        if record.hidden_traces.rows() == 0 && rows > 0 {
            return Err(GraphError::MissingTraces);
        }
        for (m, name) in [(&record.hidden_traces, "hidden"), (&record.output_traces, "output")] {
            if m.rows() != rows {
                return Err(GraphError::TraceLength { expected: rows, actual: m.rows() });
            }
            let want = if name == "hidden" { topo.n_hidden } else { topo.n_out };
            if m.cols() != want {
                return Err(GraphError::Shape(format!("{name} traces have {} columns, weights imply {want}", m.cols())));
            }
        }
        let k = mp.interp_factor;
        let steps = rows * k;
        let width = mp.grid_dt();
        let active = active.map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; topo.n_hidden]);
        let mut gs = Self::empty(weights, mp, steps, active);
        gs.input_bins = bin_inputs(inputs, steps, width, record.duration)?;
        for s in &record.hidden_spikes {
            let b = bin_index(s.time, width);
            if !(s.time >= 0.0) || s.time >= record.duration || b >= steps || s.unit >= topo.n_hidden {
                return Err(GraphError::SpikeOutOfRange {
                    kind: "hidden",
                    unit: s.unit,
                    time: s.time,
                    duration: record.duration,
                });
            }
            gs.s_hidden.set(b, s.unit, 1.0);
        }
        gs.v_hidden = interpolate(&record.hidden_traces, k, norm);
        gs.v_out = interpolate(&record.output_traces, k, norm);
        gs.forward(true);
        Ok(gs)
    }

    /// Pure software simulation: the graph's own estimates serve as the
    /// "measurements" and spikes come from its own threshold crossings.
    pub fn simulate(
        inputs: &[Spike],
        duration: f64,
        weights: &NetworkWeights,
        mp: &ModelParams,
        active: Option<&[bool]>,
    ) -> Result<Self, GraphError> {
        mp.validate()?;
        let topo = weights.topology();
        let steps = steps_for(duration, mp.dt) * mp.interp_factor;
        let active = active.map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; topo.n_hidden]);
        let mut gs = Self::empty(weights, mp, steps, active);
        gs.input_bins = bin_inputs(inputs, steps, mp.grid_dt(), duration)?;
        gs.forward(false);
        Ok(gs)
    }

    /// Forward recursion. With `inject` the membrane values and spikes are
    /// already filled in from the recording; otherwise they are produced here.
    fn forward(&mut self, inject: bool) {
        let steps = self.steps();
        let (h, o) = (self.n_hidden(), self.n_out());
        let alpha = self.mp.alpha();
        let beta = self.mp.beta_s();
        let gain = self.mp.gain();
        let mut cur_h = vec![0.0; h];
        let mut cur_o = vec![0.0; o];
        if !inject {
            threshold_row(&mut self.s_hidden, &self.v_hidden, &self.active, 0);
        }
        for t in 0..steps.saturating_sub(1) {
            // Membrane: Ṽ[t+1] = f(V[t+1], α Ṽ[t] (1 − S̃[t]) + Ĩ[t]).
            {
                let v = self.v_hidden.row(t);
                let s = self.s_hidden.row(t);
                let i = self.i_hidden.row(t);
                let est = self.v_hidden_est.row_mut(t + 1);
                for j in 0..h {
                    est[j] = alpha * v[j] * (1.0 - s[j]) + gain * i[j];
                }
                let v = self.v_out.row(t);
                let i = self.i_out.row(t);
                let est = self.v_out_est.row_mut(t + 1);
                for k in 0..o {
                    est[k] = alpha * v[k] + gain * i[k];
                }
            }
            // Currents: Ĩ[t+1] = β Ĩ[t] + Σ W S̃[t].
            let w = &self.weights;
            cur_h.copy_from_slice(self.i_hidden.row(t));
            cur_h.iter_mut().for_each(|x| *x *= beta);
            for &c in &self.input_bins[t] {
                for (x, wv) in cur_h.iter_mut().zip(w.w_in.row(c)) {
                    *x += wv;
                }
            }
            cur_o.copy_from_slice(self.i_out.row(t));
            cur_o.iter_mut().for_each(|x| *x *= beta);
            for j in 0..h {
                if self.s_hidden.get(t, j) != 0.0 {
                    if let Some(w_rec) = &w.w_rec {
                        for (x, wv) in cur_h.iter_mut().zip(w_rec.row(j)) {
                            *x += wv;
                        }
                    }
                    for (x, wv) in cur_o.iter_mut().zip(w.w_out.row(j)) {
                        *x += wv;
                    }
                }
            }
            self.i_hidden.row_mut(t + 1).copy_from_slice(&cur_h);
            self.i_out.row_mut(t + 1).copy_from_slice(&cur_o);
            if !inject {
                let est = self.v_hidden_est.row(t + 1).to_vec();
                self.v_hidden.row_mut(t + 1).copy_from_slice(&est);
                let est = self.v_out_est.row(t + 1).to_vec();
                self.v_out.row_mut(t + 1).copy_from_slice(&est);
                threshold_row(&mut self.s_hidden, &self.v_hidden, &self.active, t + 1);
            }
        }
    }

    /// Reverse sweep (BPTT) from the objective's seed adjoints.
    pub fn backward(&self, seeds: &Seeds) -> Result<Gradients, GraphError> {
        let steps = self.steps();
        let (h, o) = (self.n_hidden(), self.n_out());
        if seeds.d_v_out.shape() != (steps, o) || seeds.d_s_hidden.shape() != (steps, h) {
            return Err(GraphError::Shape("seed adjoints do not match the graph".into()));
        }
        let alpha = self.mp.alpha();
        let beta = self.mp.beta_s();
        let gain = self.mp.gain();
        let w = &self.weights;
        let mut grads = Gradients::zeros_like(w);

        // Adjoints at t + 1 (zero beyond the last step).
        let mut g_vo_next = vec![0.0; o];
        let mut g_io_next = vec![0.0; o];
        let mut g_vh_next = vec![0.0; h];
        let mut g_ih_next = vec![0.0; h];
        let mut g_vo = vec![0.0; o];
        let mut g_io = vec![0.0; o];
        let mut g_vh = vec![0.0; h];
        let mut g_ih = vec![0.0; h];
        let mut g_s = vec![0.0; h];

        for t in (0..steps).rev() {
            // Readout layer.
            let seed_vo = seeds.d_v_out.row(t);
            for k in 0..o {
                g_vo[k] = seed_vo[k] + alpha * g_vo_next[k];
                g_io[k] = gain * g_vo_next[k] + beta * g_io_next[k];
            }
            // Hidden spikes feed the currents of step t + 1.
            let s_row = self.s_hidden.row(t);
            g_s.copy_from_slice(seeds.d_s_hidden.row(t));
            for j in 0..h {
                let mut acc = 0.0;
                for (wv, g) in w.w_out.row(j).iter().zip(&g_io_next) {
                    acc += wv * g;
                }
                if let Some(w_rec) = &w.w_rec {
                    for (wv, g) in w_rec.row(j).iter().zip(&g_ih_next) {
                        acc += wv * g;
                    }
                }
                g_s[j] += acc;
                if s_row[j] != 0.0 {
                    for (d, g) in grads.d_w_out.row_mut(j).iter_mut().zip(&g_io_next) {
                        *d += s_row[j] * g;
                    }
                    if let Some(d_rec) = grads.d_w_rec.as_mut() {
                        for (d, g) in d_rec.row_mut(j).iter_mut().zip(&g_ih_next) {
                            *d += s_row[j] * g;
                        }
                    }
                }
            }
            for &c in &self.input_bins[t] {
                for (d, g) in grads.d_w_in.row_mut(c).iter_mut().zip(&g_ih_next) {
                    *d += g;
                }
            }
            // Hidden membrane: reset factor is detached; the spike node
            // contributes its surrogate evaluated at the measured value.
            let v_row = self.v_hidden.row(t);
            for j in 0..h {
                let surrogate = if self.active[j] { surrogate_grad(v_row[j], &self.mp) } else { 0.0 };
                g_vh[j] = alpha * (1.0 - s_row[j]) * g_vh_next[j] + g_s[j] * surrogate;
                g_ih[j] = gain * g_vh_next[j] + beta * g_ih_next[j];
            }
            let finite = g_vh.iter().chain(&g_ih).chain(&g_vo).chain(&g_io).all(|x| x.is_finite());
            if !finite {
                return Err(GraphError::NonFinite { step: t });
            }
            std::mem::swap(&mut g_vo, &mut g_vo_next);
            std::mem::swap(&mut g_io, &mut g_io_next);
            std::mem::swap(&mut g_vh, &mut g_vh_next);
            std::mem::swap(&mut g_ih, &mut g_ih_next);
        }
        if !grads.is_finite() {
            return Err(GraphError::NonFinite { step: 0 });
        }
        Ok(grads)
    }
}
