//! Finite-difference verification of the backpropagated weight gradients.

use ndarray::{Array2, ArrayView2};

use super::pass::{self, Effects};
use super::HardwareNetwork;
use crate::{Error, Result};

/// Gradients below this magnitude are compared in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub analytic: Vec<Array2<f64>>,
    pub numeric: Vec<Array2<f64>>,
    pub max_relative_error: f64,
}

impl GradientCheck {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all weights.
    pub fn compare(analytic: &[Array2<f64>], numeric: &[Array2<f64>]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .flat_map(|(a, n)| a.iter().zip(n.iter()))
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
            .fold(0.0, f64::max)
    }
}

fn loss(net: &HardwareNetwork, x: ArrayView2<f64>, label: usize) -> f64 {
    let cache = pass::forward(net, x, &Effects::ideal(net.layers.len()), 0);
    pass::cross_entropy(&cache.output, &[label], net.n_classes).0
}

/// Compares backpropagated gradients of the cross-entropy loss on one sample
/// with central differences of step `epsilon`. Configurations where a step
/// could cross a ReLU kink or leave the weight bounds are inconclusive.
pub fn gradient_check(net: &HardwareNetwork, input: &[f64], label: usize, epsilon: f64) -> Result<GradientCheck> {
    net.validate()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {epsilon} must be positive")));
    }
    if input.len() != net.input_dim() || label >= net.n_classes {
        return Err(Error::Shape(format!(
            "sample of width {} with label {label} for a {}-input, {}-class network",
            input.len(),
            net.input_dim(),
            net.n_classes
        )));
    }
    for (l, layer) in net.layers.iter().enumerate() {
        let margin = layer
            .weights
            .iter()
            .map(|&w| (w - layer.spec.w_min).min(layer.spec.w_max - w))
            .fold(f64::INFINITY, f64::min);
        if margin <= epsilon {
            return Err(Error::Inconclusive(format!("layer {l} has a weight within {epsilon} of a bound")));
        }
    }
    let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
    let fx = Effects::ideal(net.layers.len());
    let cache = pass::forward(net, x, &fx, 0);
    // A single weight step moves a drive by at most epsilon times the
    // largest layer input; stay well clear of that.
    for (l, drive) in cache.drives.iter().enumerate() {
        let reach = 10.0 * epsilon * cache.inputs[l].iter().fold(1.0, |a: f64, &v| a.max(v.abs()));
        if drive.iter().any(|z| z.abs() <= reach) {
            return Err(Error::Inconclusive(format!("layer {l} has a pre-activation within {reach:e} of the kink")));
        }
    }
    let (_, d_out) = pass::cross_entropy(&cache.output, &[label], net.n_classes);
    let analytic = pass::backward(net, &cache, &fx, d_out);
    let mut probe = net.clone();
    let numeric = net
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            Array2::from_shape_fn(layer.weights.dim(), |(i, j)| {
                let w = layer.weights[[i, j]];
                probe.layers[l].weights[[i, j]] = w + epsilon;
                let up = loss(&probe, x, label);
                probe.layers[l].weights[[i, j]] = w - epsilon;
                let down = loss(&probe, x, label);
                probe.layers[l].weights[[i, j]] = w;
                (up - down) / (2.0 * epsilon)
            })
        })
        .collect::<Vec<_>>();
    let max_relative_error = GradientCheck::compare(&analytic, &numeric);
    Ok(GradientCheck { analytic, numeric, max_relative_error })
}
