//! In-the-loop surrogate-gradient training of spiking neural networks on an
//! emulated analog neuromorphic substrate.
//!
//! The forward pass runs on [`substrate::Substrate`], a mismatched, noisy,
//! weight-quantized LIF core. Its recorded spikes and membrane traces are
//! injected into a differentiable graph ([`graph::GraphState`]) that assumes
//! idealized homogeneous dynamics; backpropagation through time on that graph
//! yields weight updates that are written back to the device
//! ([`trainer::Trainer`]).

pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod matrix;
pub mod network;
pub mod objective;
pub mod rng;
pub mod substrate;
pub mod trainer;

pub use graph::{GraphState, Gradients, ModelParams};
pub use matrix::Matrix;
pub use network::{NetworkWeights, Spike, Topology};
pub use substrate::{EmulationRecord, NeuronParams, Substrate, SubstrateConfig};
pub use trainer::{TrainConfig, Trainer};
