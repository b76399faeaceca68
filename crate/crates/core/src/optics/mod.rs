//! Light transport from the LED plane through the mask to the PD plane.
//!
//! Three fidelity levels share one scale: the ideal matrix-vector product,
//! Monte Carlo ray tracing normalized by a collection constant, and
//! scalar angular-spectrum diffraction for blur and leakage estimates.
//! Light from different emitters is incoherent, so intensities add.

pub mod diffraction;
pub mod raytrace;

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{layout_windows, StageGeometry};
use crate::{Error, Result};

pub use diffraction::{
    angular_spectrum_propagate, DiffractionConfig, DiffractionReport, SourceField,
};
pub use raytrace::{raytrace_propagate, RaytraceOptions, Sampling};

/// Normalized LED intensities, one per emitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct IntensityVector(Vec<f64>);

impl IntensityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("intensity {i} = {v} is not a finite nonnegative value")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for IntensityVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<IntensityVector> for Vec<f64> {
    fn from(v: IntensityVector) -> Self {
        v.0
    }
}

/// Optical power collected by each photodiode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSignal(Vec<f64>);

impl DetectorSignal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((j, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("detector signal {j} = {v} is negative")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Divides every entry by `constant`.
    pub fn normalized(&self, constant: f64) -> Self {
        Self(self.0.iter().map(|v| v / constant).collect())
    }

    /// Writes `pd,power` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "pd,power")?;
        for (j, v) in self.0.iter().enumerate() {
            writeln!(out, "{j},{v:e}")?;
        }
        Ok(())
    }
}

/// O_j = sum_i I_i w_ij.
pub fn ideal_mvm(intensities: &IntensityVector, weights: &Array2<f64>) -> Result<DetectorSignal> {
    let (n, p) = weights.dim();
    if n != intensities.len() {
        return Err(Error::Shape(format!(
            "{} intensities for a weight matrix with {n} rows",
            intensities.len()
        )));
    }
    if let Some(((i, j), w)) = weights.indexed_iter().find(|(_, w)| !(**w >= 0.0)) {
        return Err(Error::Domain(format!("weight ({i}, {j}) = {w} is negative")));
    }
    let mut out = vec![0.0; p];
    for (i, &x) in intensities.values().iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(weights.row(i)) {
            *o += x * w;
        }
    }
    Ok(DetectorSignal(out))
}

/// Per-weight collection efficiency of a fully open mask.
///
/// Entry (i, j) is the fraction of LED i's power that reaches PD j through
/// an open window (i, j). The collection constant is the smallest entry;
/// raytraced signals are divided by it to share the ideal MVM's scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionMap {
    pub per_weight: Array2<f64>,
    pub constant: f64,
}

impl CollectionMap {
    /// Traces the full-open reference mask of `geom`.
    pub fn measure(geom: &StageGeometry, rays_per_led: usize, seed: u64, exec: Execution) -> Result<Self> {
        if rays_per_led == 0 {
            return Err(Error::InvalidArgument("collection map needs at least one ray".into()));
        }
        let rects = layout_windows(geom, None)?;
        let (n, p) = (geom.emitters.count(), geom.detectors.count());
        let per_window = (rays_per_led / p).max(1);
        let rows = exec.map(n, |i| {
            let mut rng = crate::seed::rng(crate::seed::derive(seed, i as u64));
            (0..p)
                .map(|j| {
                    raytrace::trace_window(
                        geom,
                        &raytrace::Transmission::Open,
                        i,
                        &rects[i * p + j],
                        per_window,
                        &mut rng,
                    )
                    .per_detector[j]
                })
                .collect::<Vec<_>>()
        });
        let per_weight = Array2::from_shape_vec((n, p), rows.concat())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let constant = per_weight.iter().copied().fold(f64::INFINITY, f64::min);
        if !(constant > 0.0) {
            return Err(Error::InvalidGeometry(
                "some open window delivers no light to its detector".into(),
            ));
        }
        Ok(Self { per_weight, constant })
    }

    /// Transmissions that make the raytraced output, divided by the
    /// constant, match the ideal product for `weights`.
    pub fn compensate(&self, weights: &Array2<f64>) -> Result<Array2<f64>> {
        if weights.dim() != self.per_weight.dim() {
            return Err(Error::Shape(format!(
                "weights {:?} vs collection map {:?}",
                weights.dim(),
                self.per_weight.dim()
            )));
        }
        Ok(ndarray::Zip::from(weights)
            .and(&self.per_weight)
            .map_collect(|&w, &c| (w * self.constant / c).clamp(0.0, 1.0)))
    }
}
