//! Shared test oracles.
#![allow(dead_code)]

use itl_core::graph::{GraphState, Seeds};
use itl_core::matrix::Matrix;
use itl_core::network::{NetworkWeights, Spike, Topology};
use itl_core::objective::{self, LossConfig, LossMode};
use itl_core::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Antiderivative of `(β|v − 1| + 1)^-2`, continuous at the threshold.
pub fn surrogate_antiderivative(v: f64, beta: f64) -> f64 {
    if v < 1.0 {
        1.0 / (beta * (1.0 + beta * (1.0 - v)))
    } else {
        2.0 / beta - 1.0 / (beta * (1.0 + beta * (v - 1.0)))
    }
}

/// Tape of a baseline run: hard spikes and the membrane values that produced them.
pub struct Tape {
    pub spikes: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub struct OracleOut {
    pub v_hidden: Vec<Vec<f64>>,
    pub v_out: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
}

/// Independent forward of the LIF recursion written with plain loops.
///
/// Without a tape the spikes are hard threshold crossings. With a tape, spike
/// values are `H_base + Φ(V) − Φ(V_base)`: identical values at the baseline,
/// derivative equal to the surrogate. The reset uses the baseline spikes.
pub struct OracleNet<'a> {
    pub w: &'a NetworkWeights,
    pub mp: &'a ModelParams,
    pub bins: &'a [Vec<usize>],
    pub active: &'a [bool],
}

impl OracleNet<'_> {
    pub fn run(&self, tape: Option<&Tape>) -> OracleOut {
        let steps = self.bins.len();
        let topo = self.w.topology();
        let (h, o) = (topo.n_hidden, topo.n_out);
        let k = self.mp.interp_factor as f64;
        let dtg = self.mp.dt / k;
        let a = (-dtg / self.mp.tau_m).exp();
        let b = (-dtg / self.mp.tau_s).exp();
        let gain = 1.0 / k;
        let mut vh = vec![vec![0.0; h]; steps];
        let mut ih = vec![vec![0.0; h]; steps];
        let mut vo = vec![vec![0.0; o]; steps];
        let mut io = vec![vec![0.0; o]; steps];
        let mut s = vec![vec![0.0; h]; steps];
        for t in 0..steps {
            for j in 0..h {
                s[t][j] = if !self.active[j] {
                    0.0
                } else {
                    match tape {
                        None => (vh[t][j] >= 1.0) as u8 as f64,
                        Some(tp) => {
                            tp.spikes[t][j] + surrogate_antiderivative(vh[t][j], self.mp.beta)
                                - surrogate_antiderivative(tp.v[t][j], self.mp.beta)
                        }
                    }
                };
            }
            if t + 1 == steps {
                break;
            }
            for j in 0..h {
                let hard = match tape {
                    None => s[t][j],
                    Some(tp) => tp.spikes[t][j],
                };
                vh[t + 1][j] = a * vh[t][j] * (1.0 - hard) + gain * ih[t][j];
                let mut cur = b * ih[t][j];
                for &c in &self.bins[t] {
                    cur += self.w.w_in.get(c, j);
                }
                if let Some(r) = &self.w.w_rec {
                    for p in 0..h {
                        cur += r.get(p, j) * s[t][p];
                    }
                }
                ih[t + 1][j] = cur;
            }
            for q in 0..o {
                vo[t + 1][q] = a * vo[t][q] + gain * io[t][q];
                let mut cur = b * io[t][q];
                for p in 0..h {
                    cur += self.w.w_out.get(p, q) * s[t][p];
                }
                io[t + 1][q] = cur;
            }
        }
        OracleOut { v_hidden: vh, v_out: vo, s }
    }
}

pub fn to_matrix(rows: &[Vec<f64>], cols: usize) -> Matrix {
    Matrix::from_fn(rows.len(), cols, |t, c| rows[t][c])
}

/// One random small network problem.
pub struct Problem {
    pub weights: NetworkWeights,
    pub mp: ModelParams,
    pub inputs: Vec<Spike>,
    pub duration: f64,
    pub active: Vec<bool>,
    pub loss: LossConfig,
    pub label: usize,
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> Problem {
    let n_hidden = rng.random_range(1..=3);
    let n_out = rng.random_range(1..=(5 - n_hidden).min(2));
    let topo = Topology { n_in: rng.random_range(1..=3), n_hidden, n_out, recurrent: rng.random_bool(0.5) };
    let mut weights = NetworkWeights::zeros(&topo);
    let spread = Normal::new(0.0, 0.9).unwrap();
    for m in weights.matrices_mut() {
        m.as_mut_slice().iter_mut().for_each(|x| *x = spread.sample(rng));
    }
    if let Some(r) = weights.w_rec.as_mut() {
        (0..n_hidden).for_each(|j| r.set(j, j, 0.0));
    }
    let mp = ModelParams {
        tau_m: rng.random_range(3.0..12.0),
        tau_s: rng.random_range(3.0..12.0),
        beta: 50.0,
        dt: 1.7,
        interp_factor: rng.random_range(1..=2),
    };
    let rows = rng.random_range(4..=20 / mp.interp_factor);
    let duration = rows as f64 * mp.dt;
    let inputs = (0..rng.random_range(1..=8))
        .map(|_| Spike::new(rng.random_range(0..topo.n_in), rng.random_range(0.0..duration * 0.7)))
        .collect();
    let active = (0..n_hidden).map(|_| rng.random_bool(0.85)).collect();
    let loss = LossConfig {
        mode: if rng.random_bool(0.5) { LossMode::SumOverTime } else { LossMode::MaxOverTime },
        rho_a: 0.01,
        rho_b: 0.02,
        rho_r: 0.05,
        theta_r: 0.5,
    };
    let label = rng.random_range(0..n_out);
    Problem { weights, mp, inputs, duration, active, loss, label }
}

pub struct GradCheck {
    /// Largest `|bptt − fd| / (|fd| + floor)` over all weights.
    pub max_rel_err: f64,
    pub hidden_spikes: f64,
}

/// Compares BPTT against central finite differences of the tape-based oracle.
/// Returns `None` when a membrane comes within `10 h` of the threshold or a
/// max-over-time argmax is not unique.
pub fn gradient_check(p: &Problem, h: f64) -> Option<GradCheck> {
    let gs = GraphState::simulate(&p.inputs, p.duration, &p.weights, &p.mp, Some(&p.active)).unwrap();
    let topo = p.weights.topology();
    let net = OracleNet { w: &p.weights, mp: &p.mp, bins: &gs.input_bins, active: &p.active };
    let base = net.run(None);
    for t in 0..gs.steps() {
        for j in 0..topo.n_hidden {
            if (base.v_hidden[t][j] - 1.0).abs() < 10.0 * h {
                return None;
            }
            assert!((base.v_hidden[t][j] - gs.v_hidden.get(t, j)).abs() < 1e-12);
            assert_eq!(base.s[t][j], gs.s_hidden.get(t, j));
        }
        for q in 0..topo.n_out {
            assert!((base.v_out[t][q] - gs.v_out.get(t, q)).abs() < 1e-12);
        }
    }
    // Max-over-time routing must be locally constant.
    for q in 0..topo.n_out {
        let mut col: Vec<f64> = (0..gs.steps()).map(|t| base.v_out[t][q]).collect();
        col.sort_by(f64::total_cmp);
        if col.len() > 1 && (col[col.len() - 1] - col[col.len() - 2]).abs() < 1e-6 {
            return None;
        }
    }
    let tape = Tape { spikes: base.s.clone(), v: base.v_hidden.clone() };
    let terms = objective::combined(&p.loss, &gs.v_out, &gs.s_hidden, p.label).unwrap();
    let grads = gs.backward(&Seeds { d_v_out: terms.d_traces.clone(), d_s_hidden: terms.d_spikes.clone() }).unwrap();

    let loss_at = |w: &NetworkWeights| {
        let net = OracleNet { w, mp: &p.mp, bins: &gs.input_bins, active: &p.active };
        let out = net.run(Some(&tape));
        let vo = to_matrix(&out.v_out, topo.n_out);
        let s = to_matrix(&out.s, topo.n_hidden);
        objective::combined(&p.loss, &vo, &s, p.label).unwrap().total()
    };
    let mut max_rel_err: f64 = 0.0;
    let analytic: Vec<&Matrix> = grads.matrices().collect();
    for (m_idx, g) in analytic.iter().enumerate() {
        for e in 0..g.as_slice().len() {
            let mut plus = p.weights.clone();
            let mut minus = p.weights.clone();
            plus.matrices_mut().nth(m_idx).unwrap().as_mut_slice()[e] += h;
            minus.matrices_mut().nth(m_idx).unwrap().as_mut_slice()[e] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (g.as_slice()[e] - fd).abs() / (fd.abs() + 1e-5);
            max_rel_err = max_rel_err.max(rel);
        }
    }
    Some(GradCheck { max_rel_err, hidden_spikes: gs.s_hidden.sum() })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
