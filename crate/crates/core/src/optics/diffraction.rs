//! Scalar diffraction through a single mask window by the angular-spectrum
//! method.
//!
//! An incoherent LED is emulated by giving every source sample an
//! independent uniform random phase and averaging the PD-plane intensity
//! over many realizations. Each propagation multiplies the spectrum by
//! `H = exp(i 2 pi d sqrt(1/lambda^2 - fx^2 - fy^2))`, which has unit
//! modulus for propagating waves, so power is conserved between planes.
//!
//! The grid pitch is limited by the window (at least 32 samples across)
//! and by the angular content that reaches the window from the die. The
//! grid span must hold the region of interest plus the lateral walk-off of
//! the steepest representable plane wave, which is also the band limit of
//! the sampled transfer function.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{geometric_leakage, Point, StageGeometry, WeightMask};
use crate::seed;
use crate::{Error, Result};

/// Phase statistics of the source samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseModel {
    /// Independent uniform phase per sample, fresh for every realization.
    #[default]
    Random,
    /// All samples in phase (a coherent source).
    Flat,
}

/// Which LED lights which window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceField {
    pub led: usize,
    pub pd: usize,
    pub phase: PhaseModel,
}

impl SourceField {
    /// The LED nearest the array centre and the PD nearest beneath it.
    pub fn central(geom: &StageGeometry) -> Self {
        let nearest = |count: usize, pos: &dyn Fn(usize) -> Point, to: Point| {
            (0..count)
                .min_by(|&a, &b| {
                    let da = (pos(a).x - to.x).hypot(pos(a).y - to.y);
                    let db = (pos(b).x - to.x).hypot(pos(b).y - to.y);
                    da.total_cmp(&db)
                })
                .unwrap_or(0)
        };
        let led = nearest(geom.emitters.count(), &|i| geom.emitters.position(i), geom.detectors.origin);
        let pd = nearest(geom.detectors.count(), &|j| geom.detectors.position(j), geom.emitters.position(led));
        Self { led, pd, phase: PhaseModel::Random }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffractionConfig {
    /// Wavelength in micrometres.
    pub wavelength: f64,
    pub realizations: usize,
    /// Grid pitch override; must not exceed the automatic limit.
    pub dx: Option<f64>,
    /// Samples per axis override; must not be below the required count.
    pub grid: Option<usize>,
    /// Largest grid (per axis) the solver will allocate.
    pub max_grid: usize,
    pub execution: Execution,
}

impl Default for DiffractionConfig {
    fn default() -> Self {
        Self {
            wavelength: 0.525,
            realizations: 64,
            dx: None,
            grid: None,
            max_grid: 2048,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffractionReport {
    /// Mean PD-plane intensity, row 0 at the top, centred on `center`.
    pub intensity_map: Array2<f64>,
    pub dx: f64,
    pub center: Point,
    /// Radius around the spot centroid holding 90% of the spot energy.
    pub blur_radius: f64,
    /// Energy outside the target PD active area.
    pub leakage_fraction: f64,
    /// The same fraction for the geometric spot model.
    pub geometric_leakage: f64,
    pub mask_power: f64,
    pub detector_power: f64,
    pub realizations: usize,
}

impl DiffractionReport {
    /// Leakage attributable to diffraction alone.
    pub fn excess_leakage(&self) -> f64 {
        self.leakage_fraction - self.geometric_leakage
    }

    /// 16-bit PGM of the intensity map scaled to its maximum.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = self.intensity_map.dim();
        let peak = self.intensity_map.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut buf = format!("P5\n{w} {h}\n65535\n").into_bytes();
        for &v in self.intensity_map.iter() {
            buf.extend_from_slice(&((v / peak * 65535.0).round() as u16).to_be_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Writes `x_um,y_um,intensity` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x_um,y_um,intensity")?;
        let n = self.intensity_map.nrows();
        for ((r, c), v) in self.intensity_map.indexed_iter() {
            let (x, y) = sample_position(self.center, self.dx, n, r, c);
            writeln!(out, "{x},{y},{v:e}")?;
        }
        Ok(())
    }
}

fn sample_position(center: Point, dx: f64, n: usize, r: usize, c: usize) -> (f64, f64) {
    let half = n as f64 / 2.0;
    (center.x + (c as f64 + 0.5 - half) * dx, center.y + (half - r as f64 - 0.5) * dx)
}

/// Largest grid pitch that resolves a window of width `window` lit by a
/// die of width `die` at distance `d1`.
pub fn max_pitch(window: f64, die: f64, d1: f64, wavelength: f64) -> f64 {
    (window / 32.0).min(wavelength * d1 / (2.0 * (window + die)))
}

/// Grid span needed so the steepest sampled plane wave neither wraps
/// around nor undersamples the transfer function over distance `d`.
fn walkoff_span(d: f64, dx: f64, wavelength: f64) -> Option<f64> {
    let s = wavelength / (2.0 * dx);
    if s >= 1.0 {
        return None;
    }
    Some(2.0 * d * s / (1.0 - s * s).sqrt())
}

/// Chooses `(dx, samples)` for a region of half-width `half_span`.
fn plan(
    window: f64,
    die: f64,
    half_span: f64,
    d1: f64,
    d2: f64,
    config: &DiffractionConfig,
    limit: usize,
) -> Result<(f64, usize)> {
    if !(config.wavelength > 0.0) {
        return Err(Error::InvalidArgument("wavelength must be positive".into()));
    }
    if config.realizations == 0 {
        return Err(Error::InvalidArgument("at least one phase realization is needed".into()));
    }
    let auto = max_pitch(window, die, d1, config.wavelength);
    let dx = match config.dx {
        Some(dx) if dx > 0.0 && dx <= auto => dx,
        Some(dx) => {
            let required = (2.0 * half_span / auto).ceil() as usize;
            return Err(Error::Aliasing { required, limit: (2.0 * half_span / dx).ceil() as usize });
        }
        None => auto,
    };
    let walk = walkoff_span(d1.max(d2), dx, config.wavelength).ok_or(Error::Aliasing {
        required: usize::MAX,
        limit,
    })?;
    let required = ((2.0 * half_span + walk) / dx).ceil() as usize;
    let n = match config.grid {
        Some(n) if n >= required => n,
        Some(n) => return Err(Error::Aliasing { required, limit: n }),
        None => required.next_power_of_two(),
    };
    if n > limit {
        return Err(Error::Aliasing { required: n, limit });
    }
    Ok((dx, n))
}

fn frequencies(n: usize, dx: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            k / (n as f64 * dx)
        })
        .collect()
}

/// Angular-spectrum transfer function over distance `d`, including the
/// inverse-FFT normalization `1 / norm`.
fn transfer(f2: impl Fn(usize) -> f64, len: usize, d: f64, wavelength: f64, norm: f64) -> Vec<Complex64> {
    let k2 = 1.0 / (wavelength * wavelength);
    (0..len)
        .map(|idx| {
            let arg = k2 - f2(idx);
            if arg <= 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(1.0 / norm, 2.0 * PI * d * arg.sqrt())
            }
        })
        .collect()
}

struct Plan2d {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plan2d {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    fn transpose(&self, a: &mut [Complex64]) {
        let n = self.n;
        for r in 0..n {
            for c in r + 1..n {
                a.swap(r * n + c, c * n + r);
            }
        }
    }

    /// Applies the (transpose-symmetric) spectral filter `h` to `field`.
    fn propagate(&self, field: &mut [Complex64], h: &[Complex64]) {
        self.forward.process(field);
        self.transpose(field);
        self.forward.process(field);
        for (v, t) in field.iter_mut().zip(h) {
            *v *= t;
        }
        self.inverse.process(field);
        self.transpose(field);
        self.inverse.process(field);
    }
}

fn random_phase<R: Rng + ?Sized>(rng: &mut R, model: PhaseModel) -> Complex64 {
    match model {
        PhaseModel::Random => Complex64::from_polar(1.0, 2.0 * PI * rng.random::<f64>()),
        PhaseModel::Flat => Complex64::new(1.0, 0.0),
    }
}

/// Sample indices along one axis whose centres fall within `[lo, hi]`,
/// falling back to the nearest sample for sub-pitch intervals.
fn covered(lo: f64, hi: f64, axis: &[f64]) -> Vec<usize> {
    let hit: Vec<usize> = (0..axis.len()).filter(|&k| axis[k] >= lo && axis[k] <= hi).collect();
    if !hit.is_empty() {
        return hit;
    }
    let mid = 0.5 * (lo + hi);
    vec![(0..axis.len())
        .min_by(|&a, &b| (axis[a] - mid).abs().total_cmp(&(axis[b] - mid).abs()))
        .unwrap_or(0)]
}

/// Propagates an incoherent die through one window of `mask` onto the PD plane.
pub fn angular_spectrum_propagate(
    source: &SourceField,
    geom: &StageGeometry,
    mask: &WeightMask,
    config: &DiffractionConfig,
    seed: u64,
) -> Result<DiffractionReport> {
    geom.validate()?;
    mask.consistent_with(geom)?;
    let (n_led, p) = (geom.emitters.count(), geom.detectors.count());
    if source.led >= n_led || source.pd >= p {
        return Err(Error::InvalidArgument(format!(
            "source pair ({}, {}) outside the {n_led} x {p} stage",
            source.led, source.pd
        )));
    }
    let rect = mask.window(source.led, source.pd);
    let (x0, x1, y0, y1) = rect.bounds(&geom.mask);
    let window = (x1 - x0).max(y1 - y0);
    let led = geom.emitters.position(source.led);
    let pd = geom.detectors.position(source.pd);
    let center = Point::new(0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let reach = 1.5 * geom.detectors.pitch;
    let half_span = [
        (led.x - center.x).abs() + geom.emitters.die_size,
        (led.y - center.y).abs() + geom.emitters.die_size,
        (pd.x - center.x).abs() + reach,
        (pd.y - center.y).abs() + reach,
        geom.magnification() * window,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let (dx, n) = plan(window, geom.emitters.die_size, half_span, geom.d1, geom.d2, config, config.max_grid)?;

    let axis_x: Vec<f64> = (0..n).map(|c| sample_position(center, dx, n, 0, c).0).collect();
    let axis_y: Vec<f64> = (0..n).map(|r| sample_position(center, dx, n, r, 0).1).collect();
    let half_die = 0.5 * geom.emitters.die_size;
    let src_cols = covered(led.x - half_die, led.x + half_die, &axis_x);
    let src_rows = covered(led.y - half_die, led.y + half_die, &axis_y);
    let mut amplitude = vec![0.0; n * n];
    for r in covered(y0, y1, &axis_y) {
        for c in covered(x0, x1, &axis_x) {
            let t = mask.transmission_at(&geom.mask, Point::new(axis_x[c], axis_y[r]));
            let (px, py) = geom.mask.to_pixel(Point::new(axis_x[c], axis_y[r]));
            let (px, py) = (px.floor() as i64, py.floor() as i64);
            if px >= rect.x0 && px < rect.x0 + rect.width && py >= rect.y0 && py < rect.y0 + rect.height {
                amplitude[r * n + c] = t.sqrt();
            }
        }
    }

    let freqs = frequencies(n, dx);
    let f2 = |idx: usize| freqs[idx / n].powi(2) + freqs[idx % n].powi(2);
    let norm = (n * n) as f64;
    let h1 = transfer(f2, n * n, geom.d1, config.wavelength, norm);
    let h2 = transfer(f2, n * n, geom.d2, config.wavelength, norm);
    let fft = Plan2d::new(n);

    let src_count = (src_rows.len() * src_cols.len()) as f64;
    let batch = 8;
    let batches = config.realizations.div_ceil(batch);
    let partial = config.execution.map(batches, |b| {
        let mut sum = vec![0.0; n * n];
        let mut mask_power = 0.0;
        let mut field = vec![Complex64::new(0.0, 0.0); n * n];
        for r in b * batch..((b + 1) * batch).min(config.realizations) {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            field.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for &sr in &src_rows {
                for &sc in &src_cols {
                    field[sr * n + sc] = random_phase(&mut rng, source.phase) / src_count.sqrt();
                }
            }
            fft.propagate(&mut field, &h1);
            for (v, &a) in field.iter_mut().zip(&amplitude) {
                *v *= a;
            }
            mask_power += field.iter().map(|v| v.norm_sqr()).sum::<f64>();
            fft.propagate(&mut field, &h2);
            for (s, v) in sum.iter_mut().zip(&field) {
                *s += v.norm_sqr();
            }
        }
        (sum, mask_power)
    });
    let mut total = vec![0.0; n * n];
    let mut mask_power = 0.0;
    for (sum, mp) in &partial {
        for (t, s) in total.iter_mut().zip(sum) {
            *t += s;
        }
        mask_power += mp;
    }
    let scale = 1.0 / config.realizations as f64;
    total.iter_mut().for_each(|v| *v *= scale);
    mask_power *= scale;
    let intensity_map = Array2::from_shape_vec((n, n), total).map_err(|e| Error::Shape(e.to_string()))?;

    let detector_power: f64 = intensity_map.sum();
    let half_active = 0.5 * geom.detectors.active_size;
    let mut inside = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for ((r, c), &v) in intensity_map.indexed_iter() {
        let (x, y) = (axis_x[c], axis_y[r]);
        cx += v * x;
        cy += v * y;
        inside += v
            * cell_overlap(x, dx, pd.x - half_active, pd.x + half_active)
            * cell_overlap(y, dx, pd.y - half_active, pd.y + half_active);
    }
    let centroid = Point::new(cx / detector_power, cy / detector_power);
    let mut radial: Vec<(f64, f64)> = intensity_map
        .indexed_iter()
        .map(|((r, c), &v)| ((axis_x[c] - centroid.x).hypot(axis_y[r] - centroid.y), v))
        .collect();
    radial.sort_by(|a, b| a.0.total_cmp(&b.0));
    let blur_radius = energy_radius(&radial, 0.9 * detector_power);
    let leakage_fraction = if detector_power > 0.0 { (1.0 - inside / detector_power).clamp(0.0, 1.0) } else { 0.0 };

    Ok(DiffractionReport {
        intensity_map,
        dx,
        center,
        blur_radius,
        leakage_fraction,
        geometric_leakage: geometric_leakage(geom, source.led, source.pd),
        mask_power,
        detector_power,
        realizations: config.realizations,
    })
}

/// Fraction of the sample cell `[x - dx/2, x + dx/2]` inside `[lo, hi]`.
fn cell_overlap(x: f64, dx: f64, lo: f64, hi: f64) -> f64 {
    ((x + 0.5 * dx).min(hi) - (x - 0.5 * dx).max(lo)).max(0.0) / dx
}

fn energy_radius(sorted: &[(f64, f64)], target: f64) -> f64 {
    let mut acc = 0.0;
    for &(r, v) in sorted {
        acc += v;
        if acc >= target {
            return r;
        }
    }
    sorted.last().map_or(0.0, |s| s.0)
}

/// One axis of an on-axis LED, window and PD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slit {
    pub die: f64,
    pub window: f64,
    pub active: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Slit {
    /// The slit through the unrasterized window of an on-axis pair.
    pub fn of(geom: &StageGeometry) -> Self {
        Self {
            die: geom.emitters.die_size,
            window: geom.window_extent(),
            active: geom.detectors.active_size,
            d1: geom.d1,
            d2: geom.d2,
        }
    }

    pub fn magnification(&self) -> f64 {
        (self.d1 + self.d2) / self.d1
    }

    /// Fraction of the geometric spot outside the active interval.
    pub fn geometric_leakage(&self) -> f64 {
        let m = self.magnification();
        let a = m * self.window;
        let b = (m - 1.0) * self.die;
        let cdf = |x: f64| crate::geometry::box_sum_cdf(x, a, b);
        1.0 - (cdf(0.5 * self.active) - cdf(-0.5 * self.active))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlitReport {
    pub profile: Vec<f64>,
    pub dx: f64,
    pub leakage: f64,
    pub geometric_leakage: f64,
    pub mask_power: f64,
    pub detector_power: f64,
}

impl SlitReport {
    pub fn excess_leakage(&self) -> f64 {
        self.leakage - self.geometric_leakage
    }
}

/// Two-dimensional leakage of a separable spot whose one-axis leakage is `l`.
pub fn separable_leakage(l: f64) -> f64 {
    1.0 - (1.0 - l) * (1.0 - l)
}

/// One-dimensional counterpart of [`angular_spectrum_propagate`].
pub fn slit_propagate(slit: &Slit, config: &DiffractionConfig, phase: PhaseModel, seed: u64) -> Result<SlitReport> {
    if !(slit.die > 0.0 && slit.window > 0.0 && slit.active > 0.0 && slit.d1 > 0.0 && slit.d2 > 0.0) {
        return Err(Error::InvalidGeometry(format!("slit dimensions must be positive: {slit:?}")));
    }
    let m = slit.magnification();
    let half_span = (0.5 * (m * slit.window + (m - 1.0) * slit.die)).max(0.75 * slit.active) + slit.window;
    let limit = config.max_grid.saturating_mul(config.max_grid);
    let (dx, n) = plan(slit.window, slit.die, half_span, slit.d1, slit.d2, config, limit)?;
    let axis: Vec<f64> = (0..n).map(|c| (c as f64 + 0.5 - n as f64 / 2.0) * dx).collect();
    let src = covered(-0.5 * slit.die, 0.5 * slit.die, &axis);
    let aperture = covered(-0.5 * slit.window, 0.5 * slit.window, &axis);
    let freqs = frequencies(n, dx);
    let h1 = transfer(|k| freqs[k] * freqs[k], n, slit.d1, config.wavelength, n as f64);
    let h2 = transfer(|k| freqs[k] * freqs[k], n, slit.d2, config.wavelength, n as f64);
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let propagate = |field: &mut [Complex64], h: &[Complex64]| {
        forward.process(field);
        for (v, t) in field.iter_mut().zip(h) {
            *v *= t;
        }
        inverse.process(field);
    };
    let mut open = vec![false; n];
    aperture.iter().for_each(|&k| open[k] = true);
    let norm = 1.0 / (src.len() as f64).sqrt();
    let batch = 32;
    let batches = config.realizations.div_ceil(batch);
    let partial = config.execution.map(batches, |b| {
        let mut sum = vec![0.0; n];
        let mut mask_power = 0.0;
        let mut field = vec![Complex64::new(0.0, 0.0); n];
        for r in b * batch..((b + 1) * batch).min(config.realizations) {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            field.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for &k in &src {
                field[k] = random_phase(&mut rng, phase) * norm;
            }
            propagate(&mut field, &h1);
            for (v, &o) in field.iter_mut().zip(&open) {
                if !o {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
            mask_power += field.iter().map(|v| v.norm_sqr()).sum::<f64>();
            propagate(&mut field, &h2);
            for (s, v) in sum.iter_mut().zip(&field) {
                *s += v.norm_sqr();
            }
        }
        (sum, mask_power)
    });
    let mut profile = vec![0.0; n];
    let mut mask_power = 0.0;
    for (sum, mp) in &partial {
        for (t, s) in profile.iter_mut().zip(sum) {
            *t += s;
        }
        mask_power += mp;
    }
    let scale = 1.0 / config.realizations as f64;
    profile.iter_mut().for_each(|v| *v *= scale);
    mask_power *= scale;
    let detector_power: f64 = profile.iter().sum();
    let inside: f64 = axis
        .iter()
        .zip(&profile)
        .map(|(&x, v)| v * cell_overlap(x, dx, -0.5 * slit.active, 0.5 * slit.active))
        .sum();
    Ok(SlitReport {
        profile,
        dx,
        leakage: (1.0 - inside / detector_power).clamp(0.0, 1.0),
        geometric_leakage: slit.geometric_leakage(),
        mask_power,
        detector_power,
    })
}
