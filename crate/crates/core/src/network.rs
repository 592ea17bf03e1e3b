//! Network topology, spike events and real-valued weight sets.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

/// A spike on input channel / neuron `unit` at `time` (µs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub unit: usize,
    pub time: f64,
}

impl Spike {
    pub fn new(unit: usize, time: f64) -> Self {
        Self { unit, time }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub recurrent: bool,
}

/// Real-valued weights. `w_in` is `n_in x n_hidden`, `w_rec` is
/// `n_hidden x n_hidden` (row = presynaptic), `w_out` is `n_hidden x n_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub w_in: Matrix,
    pub w_rec: Option<Matrix>,
    pub w_out: Matrix,
}

impl NetworkWeights {
    pub fn zeros(topo: &Topology) -> Self {
        Self {
            w_in: Matrix::zeros(topo.n_in, topo.n_hidden),
            w_rec: topo.recurrent.then(|| Matrix::zeros(topo.n_hidden, topo.n_hidden)),
            w_out: Matrix::zeros(topo.n_hidden, topo.n_out),
        }
    }

    pub fn topology(&self) -> Topology {
        Topology {
            n_in: self.w_in.rows(),
            n_hidden: self.w_in.cols(),
            n_out: self.w_out.cols(),
            recurrent: self.w_rec.is_some(),
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.w_in).chain(self.w_rec.as_ref()).chain(std::iter::once(&self.w_out))
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        std::iter::once(&mut self.w_in)
            .chain(self.w_rec.as_mut())
            .chain(std::iter::once(&mut self.w_out))
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Matrix::is_finite)
    }
}

/// Bin index of an event at `time` on a grid of width `width`.
///
/// A relative slack of 1e-9 bins absorbs the rounding of times that were
/// themselves produced as `k * width`.
#[inline]
pub fn bin_index(time: f64, width: f64) -> usize {
    (time / width + 1e-9).floor().max(0.0) as usize
}

/// Number of samples of period `dt` needed to cover `duration`.
#[inline]
pub fn steps_for(duration: f64, dt: f64) -> usize {
    (duration / dt - 1e-9).ceil().max(0.0) as usize
}
