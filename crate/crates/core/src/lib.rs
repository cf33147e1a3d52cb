//! Spiking neurons modeled as linear state-space systems.
//!
//! The crate implements single- and multiple-input/output spiking neurons
//! whose internal state evolves as a complex linear recurrence
//! `v[t+1] = A v[t] + B i[t]`, with spikes produced by thresholding the
//! learnable output projection `y[t] = C v[t] + c_bias`. Networks of such
//! neurons are trained with backpropagation through time, substituting
//! boxcar surrogate derivatives at the spike nonlinearities.
//!
//! Modules:
//! - [`numkit`]: complex scalars, dense matrices, radix-2 FFT
//! - [`activations`]: spike functions, GELU baseline, surrogate derivatives
//! - [`neurons`]: LIF/adLIF, the general n-dimensional neuron, the SSM
//!   neuron bank, eigenvalue initialization and stability clipping
//! - [`network`]: dense inter-layer weights, batch norm, accumulative
//!   readout, checkpointing
//! - [`bptt`]: forward unroll with tape recording, adjoint backward pass,
//!   finite-difference gradient checking
//! - [`training`]: Adam with per-group decoupled weight decay and cosine
//!   learning-rate annealing, multi-trial experiment execution
//! - [`data`]: event dataset container, binning, synthetic data
//! - [`expcli`]: experiment/sweep configuration and result tables

pub mod activations;
pub mod bptt;
pub mod data;
pub mod error;
pub mod expcli;
pub mod network;
pub mod neurons;
pub mod numkit;
pub mod training;

pub use error::{Error, Result};
