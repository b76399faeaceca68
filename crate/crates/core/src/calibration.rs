//! Calibration of a simulated hardware instance: per-weight response
//! probing, neuron exclusion, weight transfer and window alignment.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{layout_windows, PixelRect, Point, ShiftMap, SpotModel, StageGeometry};
use crate::optics::raytrace::{trace_window, Transmission};
use crate::seed;
use crate::stats;
use crate::{Error, Result};

/// How single-weight probes are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProbeFidelity {
    #[default]
    Algebraic,
    /// Monte Carlo trace of the open window with this many rays.
    Raytraced { rays: usize },
}

/// One optical layer with its paired neurons, including the hardware
/// variability calibration has to discover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub geom: StageGeometry,
    /// Injected response of each weight (LED brightness, window and PD
    /// responsivity combined), `emitters x detectors`.
    pub weight_gain: Array2<f64>,
    /// Transmission of a fully closed window relative to a fully open one.
    pub contrast_floor: f64,
    pub neuron_gain: Vec<f64>,
    pub neuron_offset: Vec<f64>,
    /// Physical displacement of the mask from its nominal position, in um.
    pub mask_offset: Point,
    /// Standard deviation of every analog reading.
    pub readout_sigma: f64,
    pub probe: ProbeFidelity,
}

impl SystemModel {
    pub fn ideal(geom: StageGeometry) -> Self {
        let (n, p) = (geom.emitters.count(), geom.detectors.count());
        Self {
            geom,
            weight_gain: Array2::ones((n, p)),
            contrast_floor: 0.0,
            neuron_gain: vec![1.0; p / 2],
            neuron_offset: vec![0.0; p / 2],
            mask_offset: Point::default(),
            readout_sigma: 0.0,
            probe: ProbeFidelity::Algebraic,
        }
    }

    /// Multiplies every weight gain by `max(0.05, 1 + sigma z)`.
    pub fn with_gain_variability(mut self, sigma: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, 0x6A1));
        let dist = Normal::new(0.0, sigma).expect("sigma must be finite and nonnegative");
        self.weight_gain.mapv_inplace(|g| g * (1.0 + dist.sample(&mut rng)).max(0.05));
        self
    }

    /// Gives a `fraction` of the neurons log-normal gains of spread `tail_sigma`
    /// and the rest a narrow spread `core_sigma`.
    pub fn with_heavy_tailed_neurons(mut self, core_sigma: f64, tail_sigma: f64, fraction: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, 0x6A2));
        let core = Normal::new(1.0, core_sigma).expect("finite sigma");
        let tail = LogNormal::new(0.0, tail_sigma).expect("finite sigma");
        let m = self.neuron_gain.len();
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut rng);
        let n_tail = ((fraction * m as f64).round() as usize).min(m);
        for (rank, &k) in idx.iter().enumerate() {
            self.neuron_gain[k] = if rank < n_tail { tail.sample(&mut rng) } else { core.sample(&mut rng).max(0.0) };
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        let (n, p) = (self.geom.emitters.count(), self.geom.detectors.count());
        if self.weight_gain.dim() != (n, p) || p % 2 != 0 {
            return Err(Error::Shape(format!("weight gains {:?} for {n} x {p} stage", self.weight_gain.dim())));
        }
        if self.neuron_gain.len() != p / 2 || self.neuron_offset.len() != p / 2 {
            return Err(Error::Shape("one neuron gain and offset per PD pair".into()));
        }
        if self.weight_gain.iter().any(|g| !(*g >= 0.0)) || !(0.0..1.0).contains(&self.contrast_floor) {
            return Err(Error::Domain("gains must be nonnegative and the contrast floor in [0, 1)".into()));
        }
        if !(self.readout_sigma >= 0.0) {
            return Err(Error::InvalidArgument("readout sigma must be nonnegative".into()));
        }
        Ok(())
    }

    fn transmission(&self, w: f64) -> f64 {
        self.contrast_floor + (1.0 - self.contrast_floor) * w
    }

    /// Noise-free PD powers for a batch of inputs through `weights`.
    pub fn pd_response(&self, weights: &Array2<f64>, inputs: &Array2<f64>) -> Array2<f64> {
        let effective = ndarray::Zip::from(weights)
            .and(&self.weight_gain)
            .map_collect(|&w, &g| g * self.transmission(w));
        inputs.dot(&effective)
    }

    /// Noise-free differencing-amplifier outputs, before the ReLU.
    pub fn neuron_response(&self, weights: &Array2<f64>, inputs: &Array2<f64>) -> Array2<f64> {
        let pd = self.pd_response(weights, inputs);
        let pos = pd.slice(s![.., 0..;2]);
        let neg = pd.slice(s![.., 1..;2]);
        let mut out = &pos - &neg;
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| self.neuron_gain[k] * v + self.neuron_offset[k]);
        }
        out
    }
}

/// Weights to probe one at a time, each read `repeats` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub weights: Vec<(usize, usize)>,
    pub repeats: usize,
}

impl ProbePlan {
    pub fn full(n: usize, p: usize) -> Self {
        Self { weights: (0..n).flat_map(|i| (0..p).map(move |j| (i, j))).collect(), repeats: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    /// Open-window response per weight, relative to the median.
    pub weight_gain: Array2<f64>,
    /// Closed over open response per weight.
    pub extinction: Array2<f64>,
    pub neuron_offset: Vec<f64>,
    pub neuron_gain: Vec<f64>,
    pub usable: Vec<bool>,
}

impl CalibrationMap {
    pub fn write_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Neuron offsets that cancel the measured ones.
    pub fn offset_correction(&self) -> Vec<f64> {
        self.neuron_offset.iter().map(|o| -o).collect()
    }
}

fn read<R: rand::Rng>(value: f64, sigma: f64, repeats: usize, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return value;
    }
    let dist = Normal::new(value, sigma).expect("sigma validated");
    (0..repeats).map(|_| dist.sample(rng)).sum::<f64>() / repeats as f64
}

/// Probes every weight alone, fully open and fully closed, then measures
/// each neuron's zero-input offset and unit-step gain at the amplifier
/// output (before the ReLU).
pub fn measure_weight_response(sys: &SystemModel, plan: &ProbePlan, seed: u64, exec: Execution) -> Result<CalibrationMap> {
    sys.validate()?;
    let (n, p) = (sys.geom.emitters.count(), sys.geom.detectors.count());
    if plan.repeats == 0 {
        return Err(Error::InvalidArgument("probe plan needs at least one repeat".into()));
    }
    let mut covered = Array2::from_elem((n, p), false);
    for &(i, j) in &plan.weights {
        if i >= n || j >= p {
            return Err(Error::Shape(format!("probe ({i}, {j}) outside the {n} x {p} stage")));
        }
        covered[[i, j]] = true;
    }
    let missing: Vec<(usize, usize)> = covered.indexed_iter().filter(|(_, c)| !**c).map(|(ij, _)| ij).collect();
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    let rects = match sys.probe {
        ProbeFidelity::Raytraced { rays: 0 } => {
            return Err(Error::InvalidArgument("raytraced probing needs rays".into()))
        }
        ProbeFidelity::Raytraced { .. } => Some(layout_windows(&sys.geom, None)?),
        ProbeFidelity::Algebraic => None,
    };
    let rows = exec.map(n, |i| {
        let mut rng = seed::rng(seed::derive_path(seed, &[0x9B, i as u64]));
        (0..p)
            .map(|j| {
                let optical = match (sys.probe, &rects) {
                    (ProbeFidelity::Raytraced { rays }, Some(r)) => {
                        trace_window(&sys.geom, &Transmission::Open, i, &r[i * p + j], rays, &mut rng).per_detector[j]
                    }
                    _ => 1.0,
                };
                let g = sys.weight_gain[[i, j]] * optical;
                let open = read(g * sys.transmission(1.0), sys.readout_sigma, plan.repeats, &mut rng);
                let closed = read(g * sys.transmission(0.0), sys.readout_sigma, plan.repeats, &mut rng);
                (open, closed)
            })
            .collect::<Vec<_>>()
    });
    let open = Array2::from_shape_fn((n, p), |(i, j)| rows[i][j].0);
    let closed = Array2::from_shape_fn((n, p), |(i, j)| rows[i][j].1);
    let median = stats::median(&open.iter().copied().collect::<Vec<_>>());
    if !(median > 0.0) {
        return Err(Error::InfeasibleCalibration("median open-window response is not positive".into()));
    }
    let weight_gain = open.mapv(|v| v / median);
    let extinction = ndarray::Zip::from(&closed)
        .and(&open)
        .map_collect(|&c, &o| if o > 0.0 { (c / o).clamp(0.0, 1.0 - f64::EPSILON) } else { 0.0 });

    let m = p / 2;
    let mut rng = seed::rng(seed::derive(seed, 0x9C));
    let zero = Array2::zeros((1, n));
    let base = sys.neuron_response(&Array2::zeros((n, p)), &zero);
    let neuron_offset: Vec<f64> = (0..m).map(|k| read(base[[0, k]], sys.readout_sigma, plan.repeats, &mut rng)).collect();
    let mut step_input = Array2::zeros((1, n));
    step_input[[0, 0]] = 1.0;
    let neuron_gain = (0..m)
        .map(|k| {
            let mut w = Array2::zeros((n, p));
            w[[0, 2 * k]] = 1.0;
            let pd = sys.pd_response(&w, &step_input);
            let drive = read(pd[[0, 2 * k]], sys.readout_sigma, plan.repeats, &mut rng)
                - read(pd[[0, 2 * k + 1]], sys.readout_sigma, plan.repeats, &mut rng);
            let out = read(sys.neuron_response(&w, &step_input)[[0, k]], sys.readout_sigma, plan.repeats, &mut rng);
            if drive.abs() > 0.0 { (out - neuron_offset[k]) / drive } else { 0.0 }
        })
        .collect();
    Ok(CalibrationMap { weight_gain, extinction, neuron_offset, neuron_gain, usable: vec![true; m] })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExclusionTolerances {
    /// Allowed relative deviation of a neuron gain from the median.
    pub gain: f64,
    /// Allowed |offset| as a fraction of `full_scale`.
    pub offset: f64,
    pub full_scale: f64,
}

impl Default for ExclusionTolerances {
    fn default() -> Self {
        Self { gain: 0.3, offset: 0.1, full_scale: 1.0 }
    }
}

/// Marks every neuron whose gain strays from the median by more than
/// `gain_tolerance` (relative) or whose |offset| exceeds `offset_tolerance`.
pub fn exclude_neurons(cal: &mut CalibrationMap, gain_tolerance: f64, offset_tolerance: f64) -> Result<Vec<bool>> {
    if !(gain_tolerance >= 0.0 && offset_tolerance >= 0.0) {
        return Err(Error::InvalidArgument("tolerances must be nonnegative".into()));
    }
    let median = stats::median(&cal.neuron_gain);
    let usable: Vec<bool> = cal
        .neuron_gain
        .iter()
        .zip(&cal.neuron_offset)
        .map(|(&g, &o)| median > 0.0 && (g / median - 1.0).abs() <= gain_tolerance && o.abs() <= offset_tolerance)
        .collect();
    if !usable.iter().any(|&u| u) {
        return Err(Error::InfeasibleCalibration("every neuron is outside tolerance".into()));
    }
    cal.usable = usable.clone();
    Ok(usable)
}

/// `w'_ij = w_ij * median(gain) / gain_ij`, clamped to `[0, w_max]`, with
/// both PD columns of unusable neurons zeroed. Gains in `cal` are already
/// relative to their median.
pub fn transfer_weights(weights: &Array2<f64>, cal: &CalibrationMap, w_max: f64) -> Result<Array2<f64>> {
    if weights.dim() != cal.weight_gain.dim() || cal.usable.len() * 2 != weights.ncols() {
        return Err(Error::Shape(format!(
            "weights {:?} vs calibration {:?} with {} neurons",
            weights.dim(),
            cal.weight_gain.dim(),
            cal.usable.len()
        )));
    }
    let anchor = stats::median(&cal.weight_gain.iter().copied().collect::<Vec<_>>());
    let mut out = weights.clone();
    for ((i, j), w) in out.indexed_iter_mut() {
        if !cal.usable[j / 2] {
            *w = 0.0;
            continue;
        }
        let g = cal.weight_gain[[i, j]];
        if !(g > 0.0) {
            return Err(Error::DivisionGuard(i, j));
        }
        *w = (*w * anchor / g).clamp(0.0, w_max);
    }
    Ok(out)
}

/// Objective for window alignment: power on the target PD minus `lambda`
/// times power on all other PDs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentObjective {
    pub lambda: f64,
}

impl Default for AlignmentObjective {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub shifts: ShiftMap,
    /// Objective before the first sweep and after every sweep.
    pub trace: Vec<f64>,
}

fn window_score(sys: &SystemModel, model: &SpotModel, rect: &PixelRect, led: usize, pd: usize, lambda: f64) -> f64 {
    let (x0, x1, y0, y1) = rect.bounds(&sys.geom.mask);
    let o = sys.mask_offset;
    let cap = model.capture(led, (x0 + o.x, x1 + o.x, y0 + o.y, y1 + o.y), Point::default());
    let total: f64 = cap.per_detector.iter().sum();
    let target = cap.per_detector[pd];
    target - lambda * (total - target)
}

/// Coordinate descent over integer per-window shifts within `max_shift`
/// pixels, scored by the separable spot model of the misaligned mask.
/// Windows are visited in a seeded order; a sweep moves each window to its
/// best non-overlapping position, and descent stops after a sweep without
/// improvement.
pub fn optimize_weight_shifts(
    sys: &SystemModel,
    objective: AlignmentObjective,
    max_shift: u32,
    seed: u64,
) -> Result<AlignmentResult> {
    sys.validate()?;
    let geom = &sys.geom;
    let (n, p) = (geom.emitters.count(), geom.detectors.count());
    let base = layout_windows(geom, None)?;
    let model = SpotModel::new(geom);
    let (width, height) = (geom.mask.width as i64, geom.mask.height as i64);
    let mut owner = vec![usize::MAX; (width * height) as usize];
    let paint = |owner: &mut Vec<usize>, r: &PixelRect, v: usize| {
        for py in r.y0..r.y0 + r.height {
            for px in r.x0..r.x0 + r.width {
                owner[(py * width + px) as usize] = v;
            }
        }
    };
    for (k, r) in base.iter().enumerate() {
        paint(&mut owner, r, k);
    }
    let free = |owner: &Vec<usize>, r: &PixelRect, k: usize| {
        r.x0 >= 0
            && r.y0 >= 0
            && r.x0 + r.width <= width
            && r.y0 + r.height <= height
            && (r.y0..r.y0 + r.height)
                .all(|py| (r.x0..r.x0 + r.width).all(|px| matches!(owner[(py * width + px) as usize], v if v == usize::MAX || v == k)))
    };
    let mut shifts = ShiftMap::zeros(n, p);
    let mut scores: Vec<f64> = (0..n * p)
        .map(|k| window_score(sys, &model, &base[k], k / p, k % p, objective.lambda))
        .collect();
    let mut trace = vec![scores.iter().sum::<f64>()];
    let mut order: Vec<usize> = (0..n * p).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, 0xA11)));
    let m = max_shift as i32;
    loop {
        let mut improved = false;
        for &k in &order {
            let (i, j) = (k / p, k % p);
            let current = shifts.shifts[k];
            let mut best = (scores[k], current);
            for dy in -m..=m {
                for dx in -m..=m {
                    if (dx, dy) == current {
                        continue;
                    }
                    let cand = base[k].shifted(dx, dy);
                    if !free(&owner, &cand, k) {
                        continue;
                    }
                    let score = window_score(sys, &model, &cand, i, j, objective.lambda);
                    if score > best.0 + 1e-12 * best.0.abs().max(1e-12) {
                        best = (score, (dx, dy));
                    }
                }
            }
            if best.1 != current {
                paint(&mut owner, &base[k].shifted(current.0, current.1), usize::MAX);
                paint(&mut owner, &base[k].shifted(best.1 .0, best.1 .1), k);
                shifts.shifts[k] = best.1;
                scores[k] = best.0;
                improved = true;
            }
        }
        trace.push(scores.iter().sum());
        if !improved {
            break;
        }
    }
    Ok(AlignmentResult { shifts, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::find_overlap;
    use rand::Rng;

    fn small_geom() -> StageGeometry {
        let mut g = StageGeometry::paper_input();
        g.emitters.rows = 2;
        g.emitters.cols = 2;
        g.detectors.rows = 2;
        g.detectors.cols = 4;
        g
    }

    #[test]
    fn ideal_system_measures_uniform() {
        let sys = SystemModel::ideal(StageGeometry::paper_input());
        let plan = ProbePlan::full(64, 100);
        let cal = measure_weight_response(&sys, &plan, 0, Execution::Parallel).unwrap();
        let (lo, hi) = cal.weight_gain.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo < 1e-6);
        assert!(cal.extinction.iter().all(|&e| e == 0.0));
        let w = Array2::from_shape_fn((64, 100), |(i, j)| 0.01 + ((i * 7 + j * 3) % 97) as f64 / 100.0);
        let back = transfer_weights(&w, &cal, 1.0).unwrap();
        assert!(back.iter().zip(w.iter()).all(|(a, b)| (a - b).abs() <= 1e-9));
    }

    #[test]
    fn incomplete_plan_is_a_coverage_error() {
        let sys = SystemModel::ideal(small_geom());
        let mut plan = ProbePlan::full(4, 8);
        plan.weights.retain(|&w| w != (1, 3));
        match measure_weight_response(&sys, &plan, 0, Execution::Sequential) {
            Err(Error::Coverage { missing }) => assert_eq!(missing, vec![(1, 3)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn raytraced_probe_recovers_injected_gains() {
        let geom = small_geom();
        let reference = SystemModel { probe: ProbeFidelity::Raytraced { rays: 1_000_000 }, ..SystemModel::ideal(geom) };
        let injected = reference.clone().with_gain_variability(0.2, 3);
        let plan = ProbePlan::full(4, 8);
        let a = measure_weight_response(&reference, &plan, 1, Execution::Parallel).unwrap();
        let b = measure_weight_response(&injected, &plan, 2, Execution::Parallel).unwrap();
        let ratio: Vec<f64> = b.weight_gain.iter().zip(a.weight_gain.iter()).map(|(x, y)| x / y).collect();
        let truth: Vec<f64> = injected.weight_gain.iter().copied().collect();
        let scale = stats::median(&ratio.iter().zip(&truth).map(|(r, t)| r / t).collect::<Vec<_>>());
        for (r, t) in ratio.iter().zip(&truth) {
            assert!((r / (scale * t) - 1.0).abs() < 0.02, "{r} vs {t}");
        }
    }

    #[test]
    fn recovers_injected_offsets_within_noise() {
        let mut sys = SystemModel::ideal(small_geom());
        sys.neuron_offset = vec![0.05, -0.02, 0.0, 0.1];
        sys.readout_sigma = 0.01;
        let plan = ProbePlan { repeats: 16, ..ProbePlan::full(4, 8) };
        let cal = measure_weight_response(&sys, &plan, 4, Execution::Sequential).unwrap();
        let bound = 5.0 * 0.01 / 4.0;
        for (m, t) in cal.neuron_offset.iter().zip(&sys.neuron_offset) {
            assert!((m - t).abs() < bound, "{m} vs {t}");
        }
    }

    #[test]
    fn exclusion_examples() {
        let mut cal = CalibrationMap {
            weight_gain: Array2::ones((2, 8)),
            extinction: Array2::zeros((2, 8)),
            neuron_offset: vec![0.0; 4],
            neuron_gain: vec![1.0; 4],
            usable: vec![true; 4],
        };
        assert_eq!(exclude_neurons(&mut cal, 0.3, 0.1).unwrap(), vec![true; 4]);
        cal.neuron_gain[2] = 0.0;
        assert_eq!(exclude_neurons(&mut cal, 0.3, 0.1).unwrap(), vec![true, true, false, true]);
        cal.neuron_offset = vec![1.0; 4];
        assert!(matches!(exclude_neurons(&mut cal, 0.3, 0.1), Err(Error::InfeasibleCalibration(_))));
    }

    #[test]
    fn excluding_heavy_tail_cuts_gain_variance() {
        let sys = SystemModel::ideal(StageGeometry::paper_input()).with_heavy_tailed_neurons(0.05, 0.8, 0.1, 7);
        let mut cal = measure_weight_response(&sys, &ProbePlan::full(64, 100), 0, Execution::Parallel).unwrap();
        let before = stats::variance(&cal.neuron_gain);
        let usable = exclude_neurons(&mut cal, 0.3, 0.1).unwrap();
        let kept: Vec<f64> = cal.neuron_gain.iter().zip(&usable).filter(|(_, u)| **u).map(|(g, _)| *g).collect();
        assert!(stats::variance(&kept) < 0.5 * before);
    }

    #[test]
    fn transfer_formula() {
        let mut gain = Array2::ones((2, 4));
        gain[[1, 2]] = 0.5;
        let cal = CalibrationMap {
            weight_gain: gain,
            extinction: Array2::zeros((2, 4)),
            neuron_offset: vec![0.0; 2],
            neuron_gain: vec![1.0; 2],
            usable: vec![true, false],
        };
        let w = Array2::from_elem((2, 4), 0.3);
        let out = transfer_weights(&w, &cal, 1.0).unwrap();
        assert_eq!(out[[0, 0]], 0.3);
        assert_eq!(out[[0, 1]], 0.3);
        assert_eq!(out[[1, 2]], 0.0);
        let mut cal2 = cal.clone();
        cal2.usable = vec![true, true];
        let out2 = transfer_weights(&w, &cal2, 1.0).unwrap();
        assert!((out2[[1, 2]] - 0.6).abs() < 1e-15);
        cal2.weight_gain[[0, 3]] = 0.0;
        assert!(matches!(transfer_weights(&w, &cal2, 1.0), Err(Error::DivisionGuard(0, 3))));
    }

    #[test]
    fn tightening_never_unexcludes() {
        let sys = SystemModel::ideal(StageGeometry::paper_input()).with_heavy_tailed_neurons(0.1, 0.5, 0.2, 9);
        let mut cal = measure_weight_response(&sys, &ProbePlan::full(64, 100), 0, Execution::Parallel).unwrap();
        let mut prev = vec![true; 50];
        for tol in [1.0, 0.5, 0.3, 0.2, 0.1] {
            let u = exclude_neurons(&mut cal, tol, 1.0).unwrap();
            assert!(u.iter().zip(&prev).all(|(now, before)| !now || *before));
            prev = u;
        }
    }

    #[test]
    fn aligned_system_keeps_zero_shifts() {
        let sys = SystemModel::ideal(StageGeometry::paper_input());
        let r = optimize_weight_shifts(&sys, AlignmentObjective::default(), 3, 0).unwrap();
        assert!(r.shifts.is_zero(), "{:?}", r.shifts.shifts.iter().filter(|s| **s != (0, 0)).count());
        assert_eq!(r.trace.len(), 2);
    }

    #[test]
    fn recovers_global_misalignment() {
        let mut sys = SystemModel::ideal(StageGeometry::paper_input());
        sys.mask_offset = Point::new(2.0 * sys.geom.mask.pixel_pitch, 0.0);
        let r = optimize_weight_shifts(&sys, AlignmentObjective::default(), 4, 1).unwrap();
        let good = r.shifts.shifts.iter().filter(|&&(dx, dy)| (dx + 2).abs() <= 1 && dy.abs() <= 1).count();
        assert!(good as f64 >= 0.9 * r.shifts.shifts.len() as f64, "{good}");
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
        let rects = layout_windows(&sys.geom, Some(&r.shifts)).unwrap();
        assert!(find_overlap(&rects, &sys.geom.mask, 100).is_none());
    }

    #[test]
    fn calibration_round_trip_restores_correlation() {
        let geom = StageGeometry::paper_input();
        let ideal = SystemModel::ideal(geom.clone());
        let varied = ideal.clone().with_gain_variability(0.2, 11);
        let mut rng = crate::seed::rng(12);
        let w = Array2::from_shape_simple_fn((64, 100), || 0.05 + 0.4 * rng.random::<f64>());
        let x = Array2::from_shape_simple_fn((200, 64), || rng.random::<f64>());
        let target = ideal.neuron_response(&w, &x);
        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        let before = stats::pearson(&flat(&varied.neuron_response(&w, &x)), &flat(&target)).unwrap();
        let cal = measure_weight_response(&varied, &ProbePlan::full(64, 100), 0, Execution::Parallel).unwrap();
        let w2 = transfer_weights(&w, &cal, 1.0).unwrap();
        let after = stats::pearson(&flat(&varied.neuron_response(&w2, &x)), &flat(&target)).unwrap();
        assert!(before < 0.99 && after >= 0.99, "{before} -> {after}");
    }
}
