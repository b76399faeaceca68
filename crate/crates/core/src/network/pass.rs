//! Batched forward and backward passes with optional hardware effects.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use super::HardwareNetwork;
use crate::electronics::NeuronCircuit;
use crate::geometry::{crosstalk_approx, Point, StageGeometry};
use crate::seed;

/// Deviations from the ideal layer applied during a pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct LayerEffect {
    /// Replaces the programmed weights (perturbed or traced transfer).
    pub weights: Option<Array2<f64>>,
    /// PD-to-PD mixing, applied as `s' = s C`.
    pub crosstalk: Option<Array2<f64>>,
    pub offset_delta: Option<Vec<f64>>,
    /// Multiplies hidden activations, one factor per sample and neuron.
    pub activation_factor: Option<Array2<f64>>,
    /// Additive Gaussian PD noise; signals are clamped at zero afterwards.
    pub pd_sigma: f64,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Effects {
    pub layers: Vec<LayerEffect>,
    pub circuit: NeuronCircuit,
    pub noise_seed: u64,
}

impl Effects {
    pub fn ideal(n_layers: usize) -> Self {
        Self { layers: vec![LayerEffect::default(); n_layers], ..Self::default() }
    }
}

pub(crate) struct Cache {
    /// Input of every layer.
    pub inputs: Vec<Array2<f64>>,
    /// Circuit drive of every hidden layer.
    pub drives: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Cache {
    /// Hidden activations, in layer order.
    pub fn hidden(&self) -> &[Array2<f64>] {
        &self.inputs[1..]
    }
}

/// Runs rows `x` (global indices starting at `first`) through `net`.
pub(crate) fn forward(net: &HardwareNetwork, x: ArrayView2<f64>, fx: &Effects, first: usize) -> Cache {
    let mut inputs = vec![x.to_owned()];
    let mut drives = Vec::new();
    let mut output = Array2::zeros((0, 0));
    let circuit = &fx.circuit;
    for (l, layer) in net.layers.iter().enumerate() {
        let e = &fx.layers[l];
        let h = inputs.last().expect("input present");
        let w = e.weights.as_ref().unwrap_or(&layer.weights);
        let mut sig = h.dot(w);
        if let Some(c) = &e.crosstalk {
            sig = sig.dot(c);
        }
        if e.pd_sigma > 0.0 {
            let dist = Normal::new(0.0, e.pd_sigma).expect("sigma validated");
            for (b, mut row) in sig.axis_iter_mut(Axis(0)).enumerate() {
                let mut rng = seed::rng(seed::derive_path(fx.noise_seed, &[l as u64, (first + b) as u64]));
                row.mapv_inplace(|v| (v + dist.sample(&mut rng)).max(0.0));
            }
        }
        if layer.spec.is_output {
            output = sig;
            break;
        }
        let m = layer.spec.n_pairs();
        let pos = sig.slice(s![.., 0..2 * m;2]);
        let neg = sig.slice(s![.., 1..2 * m;2]);
        let mut drive = (&pos - &neg) * circuit.gain;
        for (k, mut col) in drive.axis_iter_mut(Axis(1)).enumerate() {
            let delta = e.offset_delta.as_ref().map_or(0.0, |d| d[k]);
            col += layer.spec.offsets[k] + delta + circuit.offset;
        }
        let mut act = drive.mapv(|z| circuit.led_curve.apply(z));
        if let Some(f) = &e.activation_factor {
            act *= f;
        }
        drives.push(drive);
        inputs.push(act);
    }
    Cache { inputs, drives, output }
}

/// Summed softmax cross-entropy over the first `n_classes` outputs and its
/// gradient with respect to the raw outputs.
pub(crate) fn cross_entropy(output: &Array2<f64>, labels: &[usize], n_classes: usize) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(output.dim());
    let mut loss = 0.0;
    for (b, row) in output.axis_iter(Axis(0)).enumerate() {
        let logits = row.slice(s![..n_classes]);
        let mx = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let denom: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + denom.ln();
        loss += lse - logits[labels[b]];
        for k in 0..n_classes {
            grad[[b, k]] = (logits[k] - lse).exp();
        }
        grad[[b, labels[b]]] -= 1.0;
    }
    (loss, grad)
}

/// Weight gradients for `d_output`, the loss gradient at the raw outputs.
/// PD noise clamping and weight replacement are treated as identity.
pub(crate) fn backward(net: &HardwareNetwork, cache: &Cache, fx: &Effects, d_output: Array2<f64>) -> Vec<Array2<f64>> {
    let n = net.layers.len();
    let mut grads = vec![Array2::zeros((0, 0)); n];
    let mut d_act = d_output;
    for l in (0..n).rev() {
        let layer = &net.layers[l];
        let e = &fx.layers[l];
        let mut d_sig = if layer.spec.is_output {
            d_act
        } else {
            let drive = &cache.drives[l];
            let mut dz = d_act;
            if let Some(f) = &e.activation_factor {
                dz *= f;
            }
            dz.zip_mut_with(drive, |g, &z| *g *= fx.circuit.led_curve.slope(z) * fx.circuit.gain);
            let mut d = Array2::zeros((dz.nrows(), layer.spec.n_pd));
            d.slice_mut(s![.., 0..;2]).assign(&dz);
            d.slice_mut(s![.., 1..;2]).assign(&dz.mapv(|v| -v));
            d
        };
        if let Some(c) = &e.crosstalk {
            d_sig = d_sig.dot(&c.t());
        }
        grads[l] = cache.inputs[l].t().dot(&d_sig);
        if l > 0 {
            let w = e.weights.as_ref().unwrap_or(&layer.weights);
            d_act = d_sig.dot(&w.t());
        } else {
            d_act = Array2::zeros((0, 0));
        }
    }
    grads
}

/// Diagonal of the undisplaced crosstalk matrix of `geom`.
pub(crate) fn crosstalk_reference(geom: &StageGeometry) -> Vec<f64> {
    crosstalk_approx(geom, Point::default()).diag().to_vec()
}

/// Crosstalk of `geom` with spots displaced by `shift` pitches, with row j
/// divided by `reference[j]` so the undisplaced diagonal is one: the
/// collection loss of a centered spot is absorbed by the collection constant.
pub(crate) fn scaled_crosstalk(geom: &StageGeometry, shift: Point, reference: &[f64]) -> Array2<f64> {
    let mut c = crosstalk_approx(geom, shift);
    for (mut row, r) in c.axis_iter_mut(Axis(0)).zip(reference) {
        row /= *r;
    }
    c
}

pub(crate) fn normalized_crosstalk(geom: &StageGeometry, shift: Point) -> Array2<f64> {
    scaled_crosstalk(geom, shift, &crosstalk_reference(geom))
}
