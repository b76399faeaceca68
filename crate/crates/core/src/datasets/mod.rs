//! Datasets: MNIST in IDX format with its downscaling pipeline, and the
//! four-arm spiral.

pub mod idx;
pub mod resample;
pub mod spiral;

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

pub use idx::{encode_idx_images, encode_idx_labels, load_mnist_idx, parse_idx_images, parse_idx_labels, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use resample::{downscale, downscale_bilinear, mnist_pipeline, pad_and_linearize, Resampler};
pub use spiral::{encode_spiral, spiral_dataset, SpiralParams};

/// Feature rows in [0, 1] with class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// One sample per row.
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let ds = Self { inputs, labels, n_classes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.nrows() != self.labels.len() {
            return Err(Error::Consistency(format!(
                "{} input rows but {} labels",
                self.inputs.nrows(),
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::Consistency(format!("label {l} outside {} classes", self.n_classes)));
        }
        if self.inputs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("inputs must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn head(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Pads every row with zeros up to `width` features.
    pub fn padded(&self, width: usize) -> Result<Self> {
        if width < self.dim() {
            return Err(Error::Shape(format!("cannot pad {} features down to {width}", self.dim())));
        }
        let mut inputs = Array2::zeros((self.len(), width));
        inputs.slice_mut(ndarray::s![.., ..self.dim()]).assign(&self.inputs);
        Ok(Self { inputs, labels: self.labels.clone(), n_classes: self.n_classes })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Shuffled split with `train_parts : test_parts` proportions.
    pub fn split(&self, train_parts: usize, test_parts: usize, seed: u64) -> (Self, Self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::rng(seed));
        let cut = self.len() * train_parts / (train_parts + test_parts);
        (self.subset(&order[..cut]), self.subset(&order[cut..]))
    }

    /// CSV with header `label,x0,x1,...`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        writeln!(out, "label,{}", header.join(","))?;
        for (row, label) in self.inputs.rows().into_iter().zip(&self.labels) {
            write!(out, "{label}")?;
            for v in row {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, n_classes: usize) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))??;
        let dim = header
            .strip_prefix("label,")
            .ok_or_else(|| Error::Format("CSV header must start with `label,`".into()))?
            .split(',')
            .count();
        let (mut values, mut labels) = (Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Format(format!("row {} has {} fields, expected {}", k + 1, fields.len(), dim + 1)));
            }
            let parse_err = |e: &dyn std::fmt::Display| Error::Format(format!("row {}: {e}", k + 1));
            labels.push(fields[0].parse::<usize>().map_err(|e| parse_err(&e))?);
            for f in &fields[1..] {
                values.push(f.parse::<f64>().map_err(|e| parse_err(&e))?);
            }
        }
        let inputs = Array2::from_shape_vec((labels.len(), dim), values).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(inputs, labels, n_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_five_to_one_and_deterministic() {
        let ds = spiral_dataset(&SpiralParams { per_class: 150, ..SpiralParams::default() }, 1).unwrap();
        let (train, test) = ds.split(5, 1, 9);
        assert_eq!((train.len(), test.len()), (500, 100));
        assert_eq!(ds.split(5, 1, 9).0, train);
    }

    #[test]
    fn csv_round_trip() {
        let ds = spiral_dataset(&SpiralParams { per_class: 5, ..SpiralParams::default() }, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spiral.csv");
        ds.write_csv(&path).unwrap();
        assert_eq!(LabeledDataset::read_csv(&path, 4).unwrap(), ds);
    }

    #[test]
    fn rejects_inconsistent_data() {
        assert!(LabeledDataset::new(Array2::zeros((2, 3)), vec![0], 2).is_err());
        assert!(LabeledDataset::new(Array2::zeros((1, 3)), vec![5], 2).is_err());
        assert!(LabeledDataset::new(Array2::from_elem((1, 3), 2.0), vec![0], 2).is_err());
    }
}
