//! Digital twin of a multilayer incoherent optoelectronic neural network.
//!
//! Weight matrices are compiled into amplitude masks placed between LED and
//! photodiode arrays, light transport is simulated at several fidelity
//! levels, and hardware-constrained networks (nonnegative weights, paired
//! differencing ReLU) are trained so they transfer onto the simulated
//! hardware. An accelerator energy model covers the scaling analysis.
//!
//! Module map:
//! - [`geometry`]: LED/mask/PD placement, mask rasterization, crosstalk.
//! - [`optics`]: ideal MVM, Monte Carlo ray tracing, angular-spectrum diffraction.
//! - [`electronics`]: differencing neuron circuit, LED response, bandwidth, noise.
//! - [`network`]: constrained network, training, inference, evaluation.
//! - [`datasets`]: MNIST IDX I/O, downscaling, spiral generator.
//! - [`calibration`]: response measurement, neuron exclusion, weight transfer, alignment.
//! - [`energy`]: operation counting, performance per watt, diffraction limit.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod datasets;
pub mod electronics;
pub mod energy;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod network;
pub mod optics;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
