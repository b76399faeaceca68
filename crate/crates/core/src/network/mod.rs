//! Hardware-constrained network: bounded nonnegative optical MVMs followed
//! by paired differencing ReLUs, trained from scratch and run through the
//! simulated hardware.
//!
//! A hidden layer with m neurons has 2m photodiodes; PDs 2k and 2k + 1 are
//! the positive and negative inputs of neuron k. The output layer returns
//! its raw PD sums and only the first `n_classes` of them enter the loss.

pub mod eval;
pub mod gradcheck;
mod pass;
pub mod train;
pub mod twin;

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::StageGeometry;
use crate::seed;
use crate::{Error, Result};

pub use eval::{evaluate, linear_baseline, EvaluationReport, LinearConfig};
pub use gradcheck::{gradient_check, GradientCheck};
pub use train::{train, Augmentation, EpochRecord, TrainConfig, TrainOutcome};
pub use twin::{forward, Fidelity, ForwardTrace, Simulator, Twin};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub n_in: usize,
    /// Photodiodes driven by this layer: 2m for a hidden layer of m neurons.
    pub n_pd: usize,
    pub w_min: f64,
    pub w_max: f64,
    /// One per neuron; empty for the output layer.
    pub offsets: Vec<f64>,
    pub is_output: bool,
}

impl LayerSpec {
    pub fn hidden(n_in: usize, n_pairs: usize) -> Self {
        Self { n_in, n_pd: 2 * n_pairs, w_min: 0.01, w_max: 1.0, offsets: vec![0.0; n_pairs], is_output: false }
    }

    pub fn output(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_pd: n_out, w_min: 0.01, w_max: 1.0, offsets: Vec::new(), is_output: true }
    }

    pub fn n_pairs(&self) -> usize {
        if self.is_output { 0 } else { self.n_pd / 2 }
    }

    /// Width of the activation vector this layer produces.
    pub fn n_out(&self) -> usize {
        if self.is_output { self.n_pd } else { self.n_pd / 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_min >= 0.0 && self.w_min < self.w_max && self.w_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight bounds [{}, {}] must satisfy 0 <= w_min < w_max",
                self.w_min, self.w_max
            )));
        }
        if !self.is_output && (!self.n_pd.is_multiple_of(2) || self.offsets.len() != self.n_pd / 2) {
            return Err(Error::Shape(format!(
                "hidden layer with {} PDs needs an even count and {} offsets, has {}",
                self.n_pd,
                self.n_pd / 2,
                self.offsets.len()
            )));
        }
        if self.offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument("offsets must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `n_in x n_pd`, entry (i, j) couples emitter i to PD j.
    pub weights: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareNetwork {
    pub layers: Vec<Layer>,
    pub n_classes: usize,
}

/// `out_k = max(0, signals[2k] - signals[2k + 1] + offsets[k])`.
pub fn pair_difference(signals: &[f64], offsets: &[f64]) -> Result<Vec<f64>> {
    if !signals.len().is_multiple_of(2) || signals.len() / 2 != offsets.len() {
        return Err(Error::Shape(format!(
            "{} signals cannot pair with {} offsets",
            signals.len(),
            offsets.len()
        )));
    }
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(k, b)| (signals[2 * k] - signals[2 * k + 1] + b).max(0.0))
        .collect())
}

impl HardwareNetwork {
    /// Builds a network with weights drawn uniformly from
    /// `[w_min + 0.1 range, w_min + 0.5 range]`.
    pub fn init(specs: Vec<LayerSpec>, n_classes: usize, seed: u64) -> Result<Self> {
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(l, spec)| {
                let mut rng = seed::rng(seed::derive_path(seed, &[0x1417, l as u64]));
                let range = spec.w_max - spec.w_min;
                let weights = Array2::from_shape_simple_fn((spec.n_in, spec.n_pd), || {
                    spec.w_min + range * (0.1 + 0.4 * rng.random::<f64>())
                });
                Layer { spec, weights }
            })
            .collect();
        let net = Self { layers, n_classes };
        net.validate()?;
        Ok(net)
    }

    /// The 64 -> 50 -> 50 -> 64 system.
    pub fn paper(n_classes: usize, seed: u64) -> Result<Self> {
        Self::init(
            vec![LayerSpec::hidden(64, 50), LayerSpec::hidden(50, 50), LayerSpec::output(50, 64)],
            n_classes,
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.spec.validate()?;
            if layer.weights.dim() != (layer.spec.n_in, layer.spec.n_pd) {
                return Err(Error::Shape(format!(
                    "layer {l} weights {:?} do not match {} x {}",
                    layer.weights.dim(),
                    layer.spec.n_in,
                    layer.spec.n_pd
                )));
            }
            if layer.spec.is_output != (l + 1 == self.layers.len()) {
                return Err(Error::Shape("exactly the last layer must be the output layer".into()));
            }
            if l > 0 && self.layers[l - 1].spec.n_out() != layer.spec.n_in {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but the previous layer yields {}",
                    layer.spec.n_in,
                    self.layers[l - 1].spec.n_out()
                )));
            }
            let (lo, hi) = (layer.spec.w_min, layer.spec.w_max);
            if layer.weights.iter().any(|w| !(lo..=hi).contains(w)) {
                return Err(Error::Domain(format!("layer {l} has weights outside [{lo}, {hi}]")));
            }
        }
        if self.n_classes == 0 || self.n_classes > self.output_dim() {
            return Err(Error::Shape(format!(
                "{} classes for {} outputs",
                self.n_classes,
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.n_pd)
    }

    /// Whether each layer's weights fit the emitter/detector counts of the stages.
    pub fn fits(&self, stages: &[StageGeometry]) -> Result<()> {
        if stages.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} optical stages for {} layers",
                stages.len(),
                self.layers.len()
            )));
        }
        for (l, (layer, g)) in self.layers.iter().zip(stages).enumerate() {
            if (g.emitters.count(), g.detectors.count()) != layer.weights.dim() {
                return Err(Error::Config(format!(
                    "stage {l} has {} emitters and {} PDs but layer weights are {:?}",
                    g.emitters.count(),
                    g.detectors.count(),
                    layer.weights.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
            metadata,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.network.validate()?;
        Ok((ckpt.network, ckpt.metadata))
    }
}

const CHECKPOINT_FORMAT: &str = "optonet-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container for a trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub network: HardwareNetwork,
    pub metadata: serde_json::Value,
}
