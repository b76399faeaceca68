//! Inference through the simulated hardware at a chosen fidelity.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::pass::{self, Effects, LayerEffect};
use super::HardwareNetwork;
use crate::electronics::{NeuronCircuit, NoiseSpec};
use crate::exec::Execution;
use crate::geometry::{compile_mask, Point, StageGeometry};
use crate::optics::raytrace::transfer_matrix;
use crate::optics::{CollectionMap, RaytraceOptions};
use crate::seed;
use crate::{Error, Result};

/// Rows per work item when a batch is split across threads.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    /// Ideal bounded MVMs and exact differencing.
    #[default]
    Algebraic,
    /// Transfer matrices traced through the compiled, compensated masks.
    Raytraced,
    /// Algebraic transport with weight spread, offset spread, PD noise and
    /// geometric crosstalk.
    Noisy,
}

/// Hardware description the network runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twin {
    pub stages: Vec<StageGeometry>,
    pub circuit: NeuronCircuit,
    pub noise: NoiseSpec,
    /// Global spot displacement in detector pitches seen by the noisy level.
    pub misalignment: Point,
    /// Normalized traced transfer matrices, one per stage, once compiled.
    #[serde(default)]
    pub traced: Option<Vec<Array2<f64>>>,
}

impl Default for Twin {
    fn default() -> Self {
        Self {
            stages: StageGeometry::paper_stack(),
            circuit: NeuronCircuit::default(),
            noise: NoiseSpec::default(),
            misalignment: Point::default(),
            traced: None,
        }
    }
}

/// Activations of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// One `batch x neurons` matrix per hidden layer.
    pub hidden: Vec<Array2<f64>>,
    /// Raw output PD sums, `batch x outputs`.
    pub output: Array2<f64>,
}

impl ForwardTrace {
    /// Index of the largest of the first `n_classes` outputs, per sample.
    pub fn predictions(&self, n_classes: usize) -> Vec<usize> {
        self.output
            .axis_iter(Axis(0))
            .map(|row| {
                (0..n_classes).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect()
    }
}

impl Twin {
    /// Compiles every layer into a compensated mask and traces its transfer
    /// matrix, which the raytraced fidelity then uses in place of the weights.
    pub fn compile(&mut self, net: &HardwareNetwork, rays_per_led: usize, seed: u64, exec: Execution) -> Result<()> {
        net.fits(&self.stages)?;
        let opts = RaytraceOptions { execution: exec, ..RaytraceOptions::default() };
        let traced = net
            .layers
            .iter()
            .zip(&self.stages)
            .enumerate()
            .map(|(l, (layer, geom))| {
                let cmap = CollectionMap::measure(geom, rays_per_led, seed::derive_path(seed, &[l as u64, 0]), exec)?;
                let mask = compile_mask(&cmap.compensate(&layer.weights)?, geom)?;
                let t = transfer_matrix(geom, &mask, rays_per_led, seed::derive_path(seed, &[l as u64, 1]), opts)?;
                Ok(t / cmap.constant)
            })
            .collect::<Result<Vec<_>>>()?;
        self.traced = Some(traced);
        Ok(())
    }

    pub fn is_compiled(&self) -> bool {
        self.traced.is_some()
    }

    pub(crate) fn effects(&self, net: &HardwareNetwork, fidelity: Fidelity, seed: u64) -> Result<Effects> {
        self.circuit.validate()?;
        let n = net.layers.len();
        match fidelity {
            Fidelity::Algebraic => Ok(Effects { circuit: self.circuit, ..Effects::ideal(n) }),
            Fidelity::Raytraced => {
                let traced = self.traced.as_ref().ok_or_else(|| {
                    Error::Config("raytraced inference needs compiled masks; call compile first".into())
                })?;
                if traced.len() != n || traced.iter().zip(&net.layers).any(|(t, l)| t.dim() != l.weights.dim()) {
                    return Err(Error::Config("compiled masks do not match this network".into()));
                }
                let layers = traced
                    .iter()
                    .map(|t| LayerEffect { weights: Some(t.clone()), ..LayerEffect::default() })
                    .collect();
                Ok(Effects { layers, circuit: self.circuit, noise_seed: seed })
            }
            Fidelity::Noisy => {
                net.fits(&self.stages)?;
                self.noise.validate()?;
                let layers = net
                    .layers
                    .iter()
                    .zip(&self.stages)
                    .enumerate()
                    .map(|(l, (layer, geom))| {
                        let instance = seed::derive(seed, l as u64);
                        let (rows, cols) = layer.weights.dim();
                        let factors = self.noise.weight_factors(rows, cols, instance);
                        LayerEffect {
                            weights: Some(&layer.weights * &factors),
                            crosstalk: Some(pass::normalized_crosstalk(geom, self.misalignment)),
                            offset_delta: (!layer.spec.is_output)
                                .then(|| self.noise.offset_deltas(layer.spec.n_pairs(), instance)),
                            activation_factor: None,
                            pd_sigma: self.noise.pd_additive_sigma,
                        }
                    })
                    .collect();
                Ok(Effects { layers, circuit: self.circuit, noise_seed: seed::derive(self.noise.seed, seed) })
            }
        }
    }

    /// Runs every row of `inputs`. Results do not depend on `exec`.
    pub fn forward_batch(
        &self,
        net: &HardwareNetwork,
        inputs: ArrayView2<f64>,
        fidelity: Fidelity,
        seed: u64,
        exec: Execution,
    ) -> Result<ForwardTrace> {
        net.validate()?;
        if inputs.ncols() != net.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} features, network expects {}",
                inputs.ncols(),
                net.input_dim()
            )));
        }
        if inputs.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain("inputs must be finite and nonnegative".into()));
        }
        let fx = self.effects(net, fidelity, seed)?;
        let rows = inputs.nrows();
        let chunks = exec.map(rows.div_ceil(CHUNK), |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(rows);
            pass::forward(net, inputs.slice(ndarray::s![lo..hi, ..]), &fx, lo)
        });
        let join = |pick: &dyn Fn(&pass::Cache) -> Array2<f64>, width: usize| -> Array2<f64> {
            if chunks.is_empty() {
                return Array2::zeros((0, width));
            }
            let parts: Vec<Array2<f64>> = chunks.iter().map(pick).collect();
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            concatenate(Axis(0), &views).expect("chunks share widths")
        };
        let hidden = (0..net.layers.len() - 1)
            .map(|l| join(&|c: &pass::Cache| c.hidden()[l].clone(), net.layers[l].spec.n_out()))
            .collect();
        let output = join(&|c: &pass::Cache| c.output.clone(), net.output_dim());
        Ok(ForwardTrace { hidden, output })
    }
}

/// A network bound to the hardware it runs on.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub network: HardwareNetwork,
    pub twin: Twin,
}

impl Simulator {
    pub fn new(network: HardwareNetwork, twin: Twin) -> Result<Self> {
        network.validate()?;
        network.fits(&twin.stages)?;
        Ok(Self { network, twin })
    }

    pub fn compile(&mut self, rays_per_led: usize, seed: u64, exec: Execution) -> Result<()> {
        self.twin.compile(&self.network, rays_per_led, seed, exec)
    }

    pub fn forward(&self, input: &[f64], fidelity: Fidelity, seed: u64) -> Result<ForwardTrace> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
        self.twin.forward_batch(&self.network, x, fidelity, seed, Execution::Sequential)
    }
}

/// Single-sample inference on the default hardware. The raytraced level
/// needs compiled masks, so it fails here; use [`Simulator`] for it.
pub fn forward(input: &[f64], net: &HardwareNetwork, fidelity: Fidelity, seed: u64) -> Result<ForwardTrace> {
    let sim = Simulator { network: net.clone(), twin: Twin::default() };
    sim.forward(input, fidelity, seed)
}
