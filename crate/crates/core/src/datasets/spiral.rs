//! Four interleaved spiral arms, one class per arm.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::seed;
use crate::{Error, Result};

pub const CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpiralParams {
    pub per_class: usize,
    pub noise_sigma: f64,
    pub turns: f64,
}

impl Default for SpiralParams {
    fn default() -> Self {
        Self { per_class: 1000, noise_sigma: 0.2, turns: 1.75 }
    }
}

/// Arm c: `r = t`, `theta = 2 pi turns t + c pi / 2 + N(0, sigma)`, t uniform
/// in [0, 1]; both coordinates are then rescaled to [0, 1].
pub fn spiral_dataset(params: &SpiralParams, seed: u64) -> Result<LabeledDataset> {
    if params.per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    let noise = Normal::new(0.0, params.noise_sigma)
        .map_err(|_| Error::InvalidArgument(format!("noise sigma {} is invalid", params.noise_sigma)))?;
    let mut rng = seed::rng(seed);
    let n = CLASSES * params.per_class;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..CLASSES {
        for _ in 0..params.per_class {
            let t: f64 = rng.random();
            let theta = 2.0 * std::f64::consts::PI * params.turns * t
                + c as f64 * std::f64::consts::FRAC_PI_2
                + noise.sample(&mut rng);
            points.push((t * theta.cos(), t * theta.sin()));
            labels.push(c);
        }
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x_lo, x_hi) = bounds(|p| p.0);
    let (y_lo, y_hi) = bounds(|p| p.1);
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let inputs = Array2::from_shape_fn((n, 2), |(k, d)| {
        let (x, y) = points[k];
        if d == 0 { scale(x, x_lo, x_hi) } else { scale(y, y_lo, y_hi) }
    });
    LabeledDataset::new(inputs, labels, CLASSES)
}

/// Emitter encoding `[x, y, 1, 1 - x, 1 - y]`: a constant-on LED and
/// complementary inputs, so the nonnegative first layer can express any
/// affine function of the coordinates.
pub fn encode_spiral(ds: &LabeledDataset) -> Result<LabeledDataset> {
    if ds.dim() != 2 {
        return Err(Error::Shape(format!("spiral encoding needs 2 features, got {}", ds.dim())));
    }
    let inputs = Array2::from_shape_fn((ds.len(), 5), |(k, d)| {
        let (x, y) = (ds.inputs[[k, 0]], ds.inputs[[k, 1]]);
        [x, y, 1.0, 1.0 - x, 1.0 - y][d]
    });
    LabeledDataset::new(inputs, ds.labels.clone(), ds.n_classes)
}
