//! Monte Carlo ray tracing of Lambertian LED dies through the mask.
//!
//! Two estimators of the same collected power are provided. `Analog`
//! follows the physical process: a point on the die, a cosine-weighted
//! direction, the mask crossing, the landing point. `Stratified` samples
//! the die and each open window directly and weights the ray by the
//! radiometric coupling `area * d1^2 / (pi * r^4)`, so no ray is wasted
//! on opaque mask regions. Both are unbiased; the second has a far lower
//! variance for sparse masks.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DetectorSignal, IntensityVector};
use crate::exec::Execution;
use crate::geometry::{PixelRect, Point, StageGeometry, WeightMask};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Stratified,
    Analog,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaytraceOptions {
    pub sampling: Sampling,
    pub execution: Execution,
}

/// Cosine-weighted direction on the upper hemisphere (z > 0).
pub fn sample_lambertian<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    [r * phi.cos(), r * phi.sin(), (1.0 - u1).sqrt()]
}

/// Mask transmission seen by a traced window.
pub enum Transmission<'a> {
    Open,
    Mask(&'a WeightMask),
}

/// Power through one window and its distribution over the detectors, for
/// unit LED power.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTally {
    pub through: f64,
    pub per_detector: Vec<f64>,
}

/// Stratified estimate for a single window lit by `led`.
pub fn trace_window<R: Rng + ?Sized>(
    geom: &StageGeometry,
    transmission: &Transmission<'_>,
    led: usize,
    rect: &PixelRect,
    rays: usize,
    rng: &mut R,
) -> WindowTally {
    let mut tally = WindowTally { through: 0.0, per_detector: vec![0.0; geom.detectors.count()] };
    accumulate_window(geom, transmission, led, rect, rays, 1.0, rng, &mut tally);
    tally
}

#[allow(clippy::too_many_arguments)]
fn accumulate_window<R: Rng + ?Sized>(
    geom: &StageGeometry,
    transmission: &Transmission<'_>,
    led: usize,
    rect: &PixelRect,
    rays: usize,
    scale: f64,
    rng: &mut R,
    tally: &mut WindowTally,
) {
    if rays == 0 || rect.area() == 0 {
        return;
    }
    let mask = &geom.mask;
    let pitch = mask.pixel_pitch;
    let area = rect.area() as f64 * pitch * pitch;
    let src = geom.emitters.position(led);
    let die = geom.emitters.die_size;
    let m = geom.magnification();
    let d1sq = geom.d1 * geom.d1;
    let weight = scale * area * d1sq / PI / rays as f64;
    let (w, h) = (rect.width as f64, rect.height as f64);
    let (x_last, y_last) = (rect.x0 + rect.width - 1, rect.y0 + rect.height - 1);
    for _ in 0..rays {
        let ux = src.x + die * (rng.random::<f64>() - 0.5);
        let uy = src.y + die * (rng.random::<f64>() - 0.5);
        let fx = rect.x0 as f64 + w * rng.random::<f64>();
        let fy = rect.y0 as f64 + h * rng.random::<f64>();
        let t = match transmission {
            Transmission::Open => 1.0,
            Transmission::Mask(wm) => {
                wm.pixel((fx.floor() as i64).min(x_last), (fy.floor() as i64).min(y_last))
            }
        };
        if t == 0.0 {
            continue;
        }
        let mp = mask.to_physical(fx, fy);
        let (dx, dy) = (mp.x - ux, mp.y - uy);
        let r2 = dx * dx + dy * dy + d1sq;
        let power = weight * t / (r2 * r2);
        tally.through += power;
        if let Some(k) = geom.detectors.locate(Point::new(ux + m * dx, uy + m * dy)) {
            tally.per_detector[k] += power;
        }
    }
}

/// Relative importance of a window for LED `led`, used to split the ray budget.
fn window_importance(geom: &StageGeometry, led: usize, rect: &PixelRect, peak: f64) -> f64 {
    let (x0, x1, y0, y1) = rect.bounds(&geom.mask);
    let c = Point::new(0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let src = geom.emitters.position(led);
    let (dx, dy) = (c.x - src.x, c.y - src.y);
    let r2 = dx * dx + dy * dy + geom.d1 * geom.d1;
    let m = geom.magnification();
    let land = Point::new(src.x + m * dx, src.y + m * dy);
    let det = &geom.detectors;
    let half_x = 0.5 * det.cols as f64 * det.pitch + 0.5 * (x1 - x0) * m;
    let half_y = 0.5 * det.rows as f64 * det.pitch + 0.5 * (y1 - y0) * m;
    let on_array = (land.x - det.origin.x).abs() <= half_x && (land.y - det.origin.y).abs() <= half_y;
    let relevance = if on_array { 1.0 } else { 0.02 };
    peak * (x1 - x0) * (y1 - y0) / (r2 * r2) * relevance
}

struct Prepared {
    peaks: Vec<f64>,
}

impl Prepared {
    fn new(mask: &WeightMask) -> Self {
        Self { peaks: mask.windows.iter().map(|r| mask.window_peak(r)).collect() }
    }
}

fn trace_emitter_stratified<R: Rng + ?Sized>(
    geom: &StageGeometry,
    mask: &WeightMask,
    prepared: &Prepared,
    led: usize,
    rays: usize,
    rng: &mut R,
) -> Vec<f64> {
    let importance: Vec<f64> = mask
        .windows
        .iter()
        .zip(&prepared.peaks)
        .map(|(r, &pk)| if pk > 0.0 { window_importance(geom, led, r, pk) } else { 0.0 })
        .collect();
    let total: f64 = importance.iter().sum();
    let mut tally = WindowTally { through: 0.0, per_detector: vec![0.0; geom.detectors.count()] };
    if total <= 0.0 {
        return tally.per_detector;
    }
    let transmission = Transmission::Mask(mask);
    for (rect, &imp) in mask.windows.iter().zip(&importance) {
        if imp <= 0.0 {
            continue;
        }
        let n = ((rays as f64 * imp / total).floor() as usize).max(1);
        accumulate_window(geom, &transmission, led, rect, n, 1.0, rng, &mut tally);
    }
    tally.per_detector
}

fn trace_emitter_analog<R: Rng + ?Sized>(
    geom: &StageGeometry,
    mask: &WeightMask,
    led: usize,
    rays: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = vec![0.0; geom.detectors.count()];
    let src = geom.emitters.position(led);
    let die = geom.emitters.die_size;
    let m = geom.magnification();
    let weight = 1.0 / rays as f64;
    for _ in 0..rays {
        let ux = src.x + die * (rng.random::<f64>() - 0.5);
        let uy = src.y + die * (rng.random::<f64>() - 0.5);
        let [dx, dy, dz] = sample_lambertian(rng);
        if dz <= 0.0 {
            continue;
        }
        let s = geom.d1 / dz;
        let mp = Point::new(ux + s * dx, uy + s * dy);
        let t = mask.transmission_at(&geom.mask, mp);
        if t == 0.0 {
            continue;
        }
        let land = Point::new(ux + m * (mp.x - ux), uy + m * (mp.y - uy));
        if let Some(k) = geom.detectors.locate(land) {
            out[k] += weight * t;
        }
    }
    out
}

fn check(geom: &StageGeometry, mask: &WeightMask, rays_per_led: usize) -> Result<()> {
    if rays_per_led == 0 {
        return Err(Error::InvalidArgument("rays_per_led must be at least 1".into()));
    }
    geom.validate()?;
    mask.consistent_with(geom)
}

/// Per-detector power for unit power on each LED: an n x p transfer matrix.
///
/// LED `i` uses the random stream `derive(seed, i)`, so a signal built from
/// this matrix equals [`raytrace_propagate_with`] for the same seed.
pub fn transfer_matrix(
    geom: &StageGeometry,
    mask: &WeightMask,
    rays_per_led: usize,
    seed: u64,
    opts: RaytraceOptions,
) -> Result<Array2<f64>> {
    check(geom, mask, rays_per_led)?;
    let (n, p) = (geom.emitters.count(), geom.detectors.count());
    let rows = trace_emitters(geom, mask, &vec![true; n], rays_per_led, seed, opts);
    let mut out = Array2::zeros((n, p));
    for (i, row) in rows.into_iter().enumerate() {
        if let Some(row) = row {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
    }
    Ok(out)
}

fn trace_emitters(
    geom: &StageGeometry,
    mask: &WeightMask,
    active: &[bool],
    rays_per_led: usize,
    seed: u64,
    opts: RaytraceOptions,
) -> Vec<Option<Vec<f64>>> {
    let prepared = match opts.sampling {
        Sampling::Stratified => Some(Prepared::new(mask)),
        Sampling::Analog => None,
    };
    opts.execution.map(active.len(), |i| {
        if !active[i] {
            return None;
        }
        let mut rng = seed::rng(seed::derive(seed, i as u64));
        Some(match &prepared {
            Some(prep) => trace_emitter_stratified(geom, mask, prep, i, rays_per_led, &mut rng),
            None => trace_emitter_analog(geom, mask, i, rays_per_led, &mut rng),
        })
    })
}

/// Monte Carlo estimate of the power collected by each PD, using the
/// stratified estimator on all available threads.
pub fn raytrace_propagate(
    geom: &StageGeometry,
    mask: &WeightMask,
    intensities: &IntensityVector,
    rays_per_led: usize,
    seed: u64,
) -> Result<DetectorSignal> {
    raytrace_propagate_with(geom, mask, intensities, rays_per_led, seed, RaytraceOptions::default())
}

pub fn raytrace_propagate_with(
    geom: &StageGeometry,
    mask: &WeightMask,
    intensities: &IntensityVector,
    rays_per_led: usize,
    seed: u64,
    opts: RaytraceOptions,
) -> Result<DetectorSignal> {
    check(geom, mask, rays_per_led)?;
    if intensities.len() != geom.emitters.count() {
        return Err(Error::Shape(format!(
            "{} intensities for {} emitters",
            intensities.len(),
            geom.emitters.count()
        )));
    }
    let active: Vec<bool> = intensities.values().iter().map(|&v| v > 0.0).collect();
    let rows = trace_emitters(geom, mask, &active, rays_per_led, seed, opts);
    let mut out = vec![0.0; geom.detectors.count()];
    for (row, &x) in rows.iter().zip(intensities.values()) {
        if let Some(row) = row {
            for (o, v) in out.iter_mut().zip(row) {
                *o += x * v;
            }
        }
    }
    DetectorSignal::new(out)
}
