//! Accuracy, confusion and hardware/algebraic agreement, plus the
//! unconstrained linear reference classifier.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::twin::{Fidelity, Twin};
use super::HardwareNetwork;
use crate::datasets::LabeledDataset;
use crate::exec::Execution;
use crate::seed;
use crate::stats;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub fidelity: Fidelity,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Pearson r between this fidelity's and the algebraic activations,
    /// per hidden layer, over all samples and neurons.
    pub hidden_correlation: Vec<Option<f64>>,
}

impl EvaluationReport {
    pub fn write_confusion_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let k = self.confusion.len();
        let header: Vec<String> = (0..k).map(|c| format!("pred_{c}")).collect();
        writeln!(out, "true,{}", header.join(","))?;
        for (t, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{t},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Classifies `data` at `fidelity` and compares hidden activations with the
/// algebraic pass.
pub fn evaluate(
    net: &HardwareNetwork,
    twin: &Twin,
    data: &LabeledDataset,
    fidelity: Fidelity,
    seed: u64,
    exec: Execution,
) -> Result<EvaluationReport> {
    data.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if data.n_classes > net.n_classes {
        return Err(Error::Shape(format!("{} classes for a {}-class network", data.n_classes, net.n_classes)));
    }
    let trace = twin.forward_batch(net, data.inputs.view(), fidelity, seed, exec)?;
    let predictions = trace.predictions(net.n_classes);
    let mut confusion = vec![vec![0; net.n_classes]; net.n_classes];
    for (&y, &p) in data.labels.iter().zip(&predictions) {
        confusion[y][p] += 1;
    }
    let hits = (0..net.n_classes).map(|c| confusion[c][c]).sum::<usize>();
    let hidden_correlation = if fidelity == Fidelity::Algebraic {
        trace.hidden.iter().map(|_| Some(1.0)).collect()
    } else {
        let ideal = twin.forward_batch(net, data.inputs.view(), Fidelity::Algebraic, seed, exec)?;
        trace
            .hidden
            .iter()
            .zip(&ideal.hidden)
            .map(|(h, a)| stats::pearson(&h.iter().copied().collect::<Vec<_>>(), &a.iter().copied().collect::<Vec<_>>()))
            .collect()
    };
    Ok(EvaluationReport { fidelity, accuracy: hits as f64 / data.len() as f64, confusion, hidden_correlation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 128, learning_rate: 1e-2, seed: 0 }
    }
}

/// Test accuracy of an unconstrained softmax regression with bias, trained
/// from zero initialization with Adam.
pub fn linear_baseline(train: &LabeledDataset, test: &LabeledDataset, cfg: &LinearConfig) -> Result<f64> {
    train.validate()?;
    test.validate()?;
    if train.is_empty() || test.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("linear baseline needs data, epochs and a batch size".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape("train and test features differ".into()));
    }
    let (d, k) = (train.dim(), train.n_classes.max(test.n_classes));
    let mut w = Array2::<f64>::zeros((d, k));
    let mut b = Array1::<f64>::zeros(k);
    let (mut mw, mut vw) = (w.clone(), w.clone());
    let (mut mb, mut vb) = (b.clone(), b.clone());
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut t = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive_path(cfg.seed, &[0x11, epoch as u64])));
        for rows in order.chunks(cfg.batch_size) {
            let x = train.inputs.select(Axis(0), rows);
            let mut g = x.dot(&w) + &b;
            for (r, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
                let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - mx).exp());
                let s = row.sum();
                row /= s;
                row[train.labels[rows[r]]] -= 1.0;
            }
            g /= rows.len() as f64;
            let gw = x.t().dot(&g);
            let gb = g.sum_axis(Axis(0));
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let adam = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            ndarray::Zip::from(&mut w).and(&gw).and(&mut mw).and(&mut vw).for_each(|p, &g, m, v| adam(p, g, m, v));
            ndarray::Zip::from(&mut b).and(&gb).and(&mut mb).and(&mut vb).for_each(|p, &g, m, v| adam(p, g, m, v));
        }
    }
    let scores = test.inputs.dot(&w) + &b;
    let hits = scores
        .axis_iter(Axis(0))
        .zip(&test.labels)
        .filter(|(row, &y)| (0..k).all(|c| c == y || row[c] < row[y]))
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use rand::Rng;

    fn data(n: usize, seed: u64, separable: bool) -> LabeledDataset {
        let mut rng = crate::seed::rng(seed);
        let x = Array2::from_shape_simple_fn((n, 4), || rng.random::<f64>());
        let labels = x
            .axis_iter(Axis(0))
            .map(|r| {
                if separable {
                    usize::from(r[0] > r[1])
                } else {
                    usize::from((r[0] > 0.5) != (r[1] > 0.5))
                }
            })
            .collect();
        LabeledDataset::new(x, labels, 2).unwrap()
    }

    #[test]
    fn linear_baseline_separates_halfplanes_but_not_xor() {
        let cfg = LinearConfig { epochs: 200, ..LinearConfig::default() };
        let lin = linear_baseline(&data(1000, 1, true), &data(500, 2, true), &cfg).unwrap();
        assert!(lin > 0.95, "{lin}");
        let xor = linear_baseline(&data(1000, 3, false), &data(500, 4, false), &cfg).unwrap();
        assert!(xor < 0.7, "{xor}");
    }

    #[test]
    fn confusion_counts_every_sample() {
        let net = HardwareNetwork::init(vec![LayerSpec::hidden(4, 3), LayerSpec::output(3, 2)], 2, 0).unwrap();
        let twin = Twin::default();
        let ds = data(300, 5, true);
        let r = evaluate(&net, &twin, &ds, Fidelity::Algebraic, 0, Execution::Parallel).unwrap();
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 300);
        let diag: usize = (0..2).map(|c| r.confusion[c][c]).sum();
        assert!((r.accuracy - diag as f64 / 300.0).abs() < 1e-15);
        assert_eq!(r.confusion.iter().map(|row| row.iter().sum::<usize>()).collect::<Vec<_>>(), ds.class_counts());
        let dir = tempfile::tempdir().unwrap();
        r.write_confusion_csv(dir.path().join("c.csv")).unwrap();
    }
}
