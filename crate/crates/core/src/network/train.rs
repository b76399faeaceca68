//! Projected Adam training with hardware-aware augmentation.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pass::{self, Effects, LayerEffect};
use super::HardwareNetwork;
use crate::datasets::LabeledDataset;
use crate::exec::Execution;
use crate::geometry::{Point, StageGeometry};
use crate::seed;
use crate::{Error, Result};

/// Rows per gradient work item; fixed so results do not depend on threads.
const CHUNK: usize = 32;

/// Random hardware perturbations mixed into training batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    /// Chance that a batch is perturbed at all.
    pub probability: f64,
    /// Largest spot displacement, in detector pitches, per axis.
    pub crosstalk_shift: f64,
    /// Relative spread of hidden activations.
    pub activation_sigma: f64,
    pub offset_sigma: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { probability: 0.5, crosstalk_shift: 0.2, activation_sigma: 0.05, offset_sigma: 0.02 }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self { probability: 0.0, ..Self::default() }
    }

    fn enabled(&self) -> bool {
        self.probability > 0.0
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.probability)
            && self.crosstalk_shift >= 0.0
            && self.activation_sigma >= 0.0
            && self.offset_sigma >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Geometry used to draw crosstalk perturbations.
    pub stages: Vec<StageGeometry>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            augmentation: Augmentation::default(),
            stages: StageGeometry::paper_stack(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule for the four-class spiral, whose 4000 samples give few
    /// steps per epoch.
    pub fn spiral() -> Self {
        Self { epochs: 300, learning_rate: 3e-3, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("learning rate and epsilon must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub network: HardwareNetwork,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Writes `epoch,train_loss,test_accuracy` rows.
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,train_loss,test_accuracy")?;
        for r in &self.history {
            let acc = r.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{}", r.epoch, r.train_loss, acc)?;
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn new(net: &HardwareNetwork) -> Self {
        let zeros: Vec<_> = net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One projected step: gradient components pushing a weight that sits on
    /// a bound further outward are dropped, then weights are clamped.
    fn step(&mut self, net: &mut HardwareNetwork, grads: &[Array2<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (lo, hi) = (layer.spec.w_min, layer.spec.w_max);
            ndarray::Zip::from(&mut layer.weights)
                .and(&grads[l])
                .and(&mut self.m[l])
                .and(&mut self.v[l])
                .for_each(|w, &g, m, v| {
                    let g = if (*w <= lo && g > 0.0) || (*w >= hi && g < 0.0) { 0.0 } else { g };
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let step = cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
                    *w = (*w - step).clamp(lo, hi);
                });
        }
    }
}

/// Mean loss and mean weight gradients over `rows` of `data`.
pub(crate) fn batch_gradient(
    net: &HardwareNetwork,
    data: &LabeledDataset,
    rows: &[usize],
    fx: &Effects,
    exec: Execution,
) -> (f64, Vec<Array2<f64>>) {
    let parts = exec.map(rows.len().div_ceil(CHUNK), |c| {
        let idx = &rows[c * CHUNK..((c + 1) * CHUNK).min(rows.len())];
        let x = data.inputs.select(Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&r| data.labels[r]).collect();
        let local = slice_effects(fx, c * CHUNK, idx.len());
        let cache = pass::forward(net, x.view(), &local, 0);
        let (loss, d_out) = pass::cross_entropy(&cache.output, &labels, net.n_classes);
        (loss, pass::backward(net, &cache, &local, d_out))
    });
    let scale = 1.0 / rows.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    grads.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grads)
}

/// Restricts per-sample effects to rows `lo..lo + n` of the batch.
fn slice_effects(fx: &Effects, lo: usize, n: usize) -> Effects {
    let layers = fx
        .layers
        .iter()
        .map(|e| LayerEffect {
            activation_factor: e.activation_factor.as_ref().map(|f| f.slice(ndarray::s![lo..lo + n, ..]).to_owned()),
            ..e.clone()
        })
        .collect();
    Effects { layers, ..fx.clone() }
}

fn batch_effects(
    net: &HardwareNetwork,
    cfg: &TrainConfig,
    references: &[Vec<f64>],
    batch: usize,
    stream: u64,
) -> Effects {
    let n = net.layers.len();
    let aug = &cfg.augmentation;
    let mut rng = seed::rng(stream);
    if !aug.enabled() || rng.random::<f64>() >= aug.probability {
        return Effects::ideal(n);
    }
    let act = Normal::new(0.0, aug.activation_sigma).expect("validated");
    let off = Normal::new(0.0, aug.offset_sigma).expect("validated");
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let s = aug.crosstalk_shift;
            let shift = Point::new(rng.random_range(-s..=s), rng.random_range(-s..=s));
            let crosstalk = Some(pass::scaled_crosstalk(&cfg.stages[l], shift, &references[l]));
            if layer.spec.is_output {
                return LayerEffect { crosstalk, ..LayerEffect::default() };
            }
            let m = layer.spec.n_pairs();
            LayerEffect {
                crosstalk,
                offset_delta: Some((0..m).map(|_| off.sample(&mut rng)).collect()),
                activation_factor: Some(Array2::from_shape_simple_fn((batch, m), || 1.0 + act.sample(&mut rng))),
                ..LayerEffect::default()
            }
        })
        .collect();
    Effects { layers, ..Effects::default() }
}

/// Fraction of `data` classified correctly by the algebraic network.
pub(crate) fn algebraic_accuracy(net: &HardwareNetwork, data: &LabeledDataset, exec: Execution) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits: usize = exec
        .map(data.len().div_ceil(256), |c| {
            let lo = c * 256;
            let hi = (lo + 256).min(data.len());
            let cache = pass::forward(net, data.inputs.slice(ndarray::s![lo..hi, ..]), &Effects::ideal(net.layers.len()), lo);
            cache
                .output
                .axis_iter(Axis(0))
                .zip(&data.labels[lo..hi])
                .filter(|(row, &y)| (0..net.n_classes).all(|k| k == y || row[k] < row[y]))
                .count()
        })
        .into_iter()
        .sum();
    hits as f64 / data.len() as f64
}

/// Trains a copy of `template` on `data`, optionally tracking test accuracy
/// after every epoch.
pub fn train(
    template: &HardwareNetwork,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    template.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.dim() != template.input_dim() || data.n_classes > template.n_classes {
        return Err(Error::Shape(format!(
            "dataset ({} features, {} classes) does not fit the network ({} inputs, {} classes)",
            data.dim(),
            data.n_classes,
            template.input_dim(),
            template.n_classes
        )));
    }
    if let Some(t) = test {
        if t.dim() != data.dim() {
            return Err(Error::Shape("test and training features differ".into()));
        }
    }
    let references = if cfg.augmentation.enabled() {
        template.fits(&cfg.stages)?;
        cfg.stages.iter().map(pass::crosstalk_reference).collect()
    } else {
        Vec::new()
    };
    let mut net = template.clone();
    let mut adam = Adam::new(&net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive_path(cfg.seed, &[0x5A, epoch as u64])));
        let mut total = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let stream = seed::derive_path(cfg.seed, &[0xA6, epoch as u64, b as u64]);
            let fx = batch_effects(&net, cfg, &references, rows.len(), stream);
            let (loss, grads) = batch_gradient(&net, data, rows, &fx, cfg.execution);
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::TrainingFailure { epoch, batch: b, detail: format!("loss {loss}") });
            }
            total += loss * rows.len() as f64;
            adam.step(&mut net, &grads, cfg);
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / data.len() as f64,
            test_accuracy: test.map(|t| algebraic_accuracy(&net, t, cfg.execution)),
        });
    }
    Ok(TrainOutcome { network: net, history })
}
