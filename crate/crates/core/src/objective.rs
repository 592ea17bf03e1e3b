//! Task losses and activity regularizers.
//!
//! Every function returns its scalar value together with the adjoint of that
//! value with respect to its input, ready to be used as a seed for
//! [`GraphState::backward`](crate::graph::GraphState::backward).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("output traces are empty")]
    EmptyTrace,
    #[error("label {label} out of range for {n_out} outputs")]
    Label { label: usize, n_out: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    MaxOverTime,
    SumOverTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Amplitude penalty strength.
    pub rho_a: f64,
    /// Burst (per-neuron squared count) regularizer strength.
    pub rho_b: f64,
    /// Rate regularizer strength.
    pub rho_r: f64,
    /// Rate regularizer threshold, total hidden spikes per sample.
    pub theta_r: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::mnist()
    }
}

impl LossConfig {
    pub fn mnist() -> Self {
        Self { mode: LossMode::MaxOverTime, rho_a: 4e-4, rho_b: 0.005, rho_r: 0.0, theta_r: 0.0 }
    }

    pub fn shd() -> Self {
        Self { mode: LossMode::SumOverTime, rho_a: 0.0, rho_b: 0.0, rho_r: 0.6e-3, theta_r: 600.0 }
    }
}

/// Per-unit logits over the first `rows` time steps, with the time step that
/// produced each maximum (earliest on ties). Sum mode reports step 0.
pub fn logits(traces: &Matrix, mode: LossMode, rows: usize) -> (Vec<f64>, Vec<usize>) {
    let rows = rows.min(traces.rows());
    let n = traces.cols();
    match mode {
        LossMode::MaxOverTime => {
            let mut best = vec![f64::NEG_INFINITY; n];
            let mut arg = vec![0usize; n];
            for t in 0..rows {
                for (k, &v) in traces.row(t).iter().enumerate() {
                    if v > best[k] {
                        best[k] = v;
                        arg[k] = t;
                    }
                }
            }
            (best, arg)
        }
        LossMode::SumOverTime => {
            let mut sum = vec![0.0; n];
            for t in 0..rows {
                for (s, &v) in sum.iter_mut().zip(traces.row(t)) {
                    *s += v;
                }
            }
            (sum, vec![0; n])
        }
    }
}

/// Index of the largest logit (lowest index on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Negative log-likelihood of the softmax over time-reduced output traces.
pub fn task_loss(traces: &Matrix, label: usize, mode: LossMode) -> Result<(f64, Matrix), ObjectiveError> {
    let (rows, n) = traces.shape();
    if rows == 0 || n == 0 {
        return Err(ObjectiveError::EmptyTrace);
    }
    if label >= n {
        return Err(ObjectiveError::Label { label, n_out: n });
    }
    let (z, arg) = logits(traces, mode, rows);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let loss = lse - z[label];
    let p = softmax(&z);
    let mut adj = Matrix::zeros(rows, n);
    for k in 0..n {
        let g = p[k] - if k == label { 1.0 } else { 0.0 };
        match mode {
            LossMode::MaxOverTime => adj.set(arg[k], k, g),
            LossMode::SumOverTime => (0..rows).for_each(|t| adj.set(t, k, g)),
        }
    }
    Ok((loss, adj))
}

/// `rho_a * mean_i (max_t V_i[t])^2`.
pub fn amplitude_penalty(traces: &Matrix, rho_a: f64) -> (f64, Matrix) {
    let (rows, n) = traces.shape();
    let mut adj = Matrix::zeros(rows, n);
    if rows == 0 || n == 0 || rho_a == 0.0 {
        return (0.0, adj);
    }
    let (peak, arg) = logits(traces, LossMode::MaxOverTime, rows);
    let value = rho_a * peak.iter().map(|m| m * m).sum::<f64>() / n as f64;
    for k in 0..n {
        adj.set(arg[k], k, 2.0 * rho_a * peak[k] / n as f64);
    }
    (value, adj)
}

fn counts(spikes: &Matrix) -> Vec<f64> {
    let mut c = vec![0.0; spikes.cols()];
    for t in 0..spikes.rows() {
        for (c, s) in c.iter_mut().zip(spikes.row(t)) {
            *c += s;
        }
    }
    c
}

/// `rho_b / N_H * Σ_i (Σ_t S_i[t])^2`, with adjoint `2 rho_b c_i / N_H` on
/// every time step of neuron `i`.
pub fn burst_regularizer(spikes: &Matrix, rho_b: f64) -> (f64, Matrix) {
    let (rows, n) = spikes.shape();
    let mut adj = Matrix::zeros(rows, n);
    if n == 0 || rho_b == 0.0 {
        return (0.0, adj);
    }
    let c = counts(spikes);
    let nh = n as f64;
    let value = rho_b * c.iter().map(|x| x * x).sum::<f64>() / nh;
    for t in 0..rows {
        for (a, &ci) in adj.row_mut(t).iter_mut().zip(&c) {
            *a = 2.0 * rho_b * ci / nh;
        }
    }
    (value, adj)
}

/// `rho_r * max(0, Σ_{i,t} S_i[t] − theta_r)^2`.
pub fn rate_regularizer(spikes: &Matrix, rho_r: f64, theta_r: f64) -> (f64, Matrix) {
    let mut adj = Matrix::zeros(spikes.rows(), spikes.cols());
    let excess = spikes.sum() - theta_r;
    if excess <= 0.0 || rho_r == 0.0 {
        return (0.0, adj);
    }
    let g = 2.0 * rho_r * excess;
    adj.as_mut_slice().iter_mut().for_each(|a| *a = g);
    (rho_r * excess * excess, adj)
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub task: f64,
    pub amplitude: f64,
    pub burst: f64,
    pub rate: f64,
    /// Adjoint with respect to the output traces.
    pub d_traces: Matrix,
    /// Adjoint with respect to the hidden spikes.
    pub d_spikes: Matrix,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.task + self.amplitude + self.burst + self.rate
    }
}

/// Task loss plus all configured regularizers, adjoints summed.
pub fn combined(
    cfg: &LossConfig,
    traces: &Matrix,
    spikes: &Matrix,
    label: usize,
) -> Result<LossTerms, ObjectiveError> {
    let (task, mut d_traces) = task_loss(traces, label, cfg.mode)?;
    let (amplitude, d_amp) = amplitude_penalty(traces, cfg.rho_a);
    d_traces.axpy(1.0, &d_amp);
    let (burst, mut d_spikes) = burst_regularizer(spikes, cfg.rho_b);
    let (rate, d_rate) = rate_regularizer(spikes, cfg.rho_r, cfg.theta_r);
    d_spikes.axpy(1.0, &d_rate);
    Ok(LossTerms { task, amplitude, burst, rate, d_traces, d_spikes })
}
