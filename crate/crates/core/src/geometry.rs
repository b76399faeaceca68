//! Physical layout of one optical matrix-vector stage.
//!
//! An LED array sits at z = 0, the amplitude mask at z = d1 and the
//! photodiode (PD) array at z = d1 + d2. Light from LED i reaches PD j
//! through a window on the mask whose transmission encodes the weight
//! W[i][j]. All lengths are in micrometres. Physical coordinates have x to
//! the right and y up with the origin at the mask centre; mask pixel (0, 0)
//! is the top-left pixel. Grid element (row, col) is numbered
//! `row * cols + col`, with row 0 at the top.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Square LED dies on a rectangular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterGrid {
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
    pub die_size: f64,
    /// Centre of the grid.
    pub origin: Point,
}

/// Square photodiode active areas on a rectangular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorGrid {
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
    pub active_size: f64,
    /// Centre of the grid.
    pub origin: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPlane {
    pub pixel_pitch: f64,
    pub width: usize,
    pub height: usize,
    pub gray_levels: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageGeometry {
    pub emitters: EmitterGrid,
    pub detectors: DetectorGrid,
    pub mask: MaskPlane,
    /// LED plane to mask distance.
    pub d1: f64,
    /// Mask to PD plane distance.
    pub d2: f64,
    /// Fraction by which each window is shrunk below the ray-bundle footprint.
    #[serde(default = "default_guard")]
    pub guard_fraction: f64,
}

fn default_guard() -> f64 {
    0.1
}

fn grid_position(rows: usize, cols: usize, pitch: f64, origin: Point, index: usize) -> Point {
    let (r, c) = (index / cols, index % cols);
    Point {
        x: origin.x + (c as f64 - (cols as f64 - 1.0) / 2.0) * pitch,
        y: origin.y + ((rows as f64 - 1.0) / 2.0 - r as f64) * pitch,
    }
}

impl EmitterGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn position(&self, index: usize) -> Point {
        grid_position(self.rows, self.cols, self.pitch, self.origin, index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidGeometry("emitter grid needs at least one row and column".into()));
        }
        if !(self.die_size > 0.0 && self.die_size <= self.pitch) {
            return Err(Error::InvalidGeometry(format!(
                "emitter die size {} must lie in (0, pitch = {}]",
                self.die_size, self.pitch
            )));
        }
        Ok(())
    }
}

impl DetectorGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn position(&self, index: usize) -> Point {
        grid_position(self.rows, self.cols, self.pitch, self.origin, index)
    }

    /// Index of the detector whose active area contains `p`, if any.
    #[inline]
    pub fn locate(&self, p: Point) -> Option<usize> {
        let fc = (p.x - self.origin.x) / self.pitch + (self.cols as f64 - 1.0) / 2.0;
        let fr = (self.rows as f64 - 1.0) / 2.0 - (p.y - self.origin.y) / self.pitch;
        let (c, r) = (fc.round(), fr.round());
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        let half = 0.5 * self.active_size / self.pitch;
        if (fc - c).abs() <= half && (fr - r).abs() <= half {
            Some(r as usize * self.cols + c as usize)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidGeometry("detector grid needs at least one row and column".into()));
        }
        if !(self.active_size > 0.0 && self.active_size <= self.pitch) {
            return Err(Error::InvalidGeometry(format!(
                "detector active size {} must lie in (0, pitch = {}]",
                self.active_size, self.pitch
            )));
        }
        Ok(())
    }
}

impl MaskPlane {
    /// The 1024 x 768 transmissive SLM with 36 um pixels, 8-bit gray scale.
    pub fn slm() -> Self {
        Self { pixel_pitch: 36.0, width: 1024, height: 768, gray_levels: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_pitch > 0.0) {
            return Err(Error::InvalidGeometry("mask pixel pitch must be positive".into()));
        }
        if self.gray_levels < 2 {
            return Err(Error::InvalidGeometry("mask needs at least two gray levels".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGeometry("mask resolution must be nonzero".into()));
        }
        Ok(())
    }

    /// Continuous pixel coordinates of a physical point; pixel (px, py)
    /// covers `[px, px + 1) x [py, py + 1)`.
    #[inline]
    pub fn to_pixel(&self, p: Point) -> (f64, f64) {
        (
            p.x / self.pixel_pitch + self.width as f64 / 2.0,
            self.height as f64 / 2.0 - p.y / self.pixel_pitch,
        )
    }

    /// Physical position of continuous pixel coordinates.
    #[inline]
    pub fn to_physical(&self, fx: f64, fy: f64) -> Point {
        Point {
            x: (fx - self.width as f64 / 2.0) * self.pixel_pitch,
            y: (self.height as f64 / 2.0 - fy) * self.pixel_pitch,
        }
    }
}

impl StageGeometry {
    pub fn validate(&self) -> Result<()> {
        self.emitters.validate()?;
        self.detectors.validate()?;
        self.mask.validate()?;
        if !(self.d1 > 0.0 && self.d2 > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "distances must be positive (d1 = {}, d2 = {})",
                self.d1, self.d2
            )));
        }
        if !(0.0..1.0).contains(&self.guard_fraction) {
            return Err(Error::InvalidGeometry("guard fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn magnification(&self) -> f64 {
        (self.d1 + self.d2) / self.d1
    }

    /// Side of the square window placed for each weight.
    pub fn window_extent(&self) -> f64 {
        let s = self.d1 / (self.d1 + self.d2);
        let footprint =
            self.emitters.die_size + (self.detectors.active_size - self.emitters.die_size) * s;
        footprint * (1.0 - self.guard_fraction)
    }

    pub fn window_center(&self, led: usize, pd: usize) -> Point {
        let m = self.magnification();
        let (a, b) = (self.emitters.position(led), self.detectors.position(pd));
        Point::new(a.x + (b.x - a.x) / m, a.y + (b.y - a.y) / m)
    }

    fn base(emitter_rows: usize, emitter_cols: usize, detector_rows: usize, detector_cols: usize) -> Self {
        Self {
            emitters: EmitterGrid {
                rows: emitter_rows,
                cols: emitter_cols,
                pitch: 4000.0,
                die_size: 50.0,
                origin: Point::default(),
            },
            detectors: DetectorGrid {
                rows: detector_rows,
                cols: detector_cols,
                pitch: 700.0,
                active_size: 600.0,
                origin: Point::default(),
            },
            mask: MaskPlane::slm(),
            d1: 2_000.0,
            d2: 4_000.0,
            guard_fraction: 0.1,
        }
    }

    /// Input stage: 8 x 8 LEDs onto 10 x 10 PDs.
    pub fn paper_input() -> Self {
        Self::base(8, 8, 10, 10)
    }

    /// Hidden stage: 5 x 10 LEDs onto 10 x 10 PDs.
    pub fn paper_hidden() -> Self {
        Self::base(5, 10, 10, 10)
    }

    /// Output stage: 5 x 10 LEDs onto 8 x 8 PDs.
    pub fn paper_output() -> Self {
        Self::base(5, 10, 8, 8)
    }

    /// The three stages of the 64-50-50-64 system.
    pub fn paper_stack() -> Vec<Self> {
        vec![Self::paper_input(), Self::paper_hidden(), Self::paper_output()]
    }
}

/// M = (d1 + d2) / d1.
pub fn magnification(d1: f64, d2: f64) -> Result<f64> {
    if !(d1 > 0.0 && d2 > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "distances must be positive (d1 = {d1}, d2 = {d2})"
        )));
    }
    Ok((d1 + d2) / d1)
}

/// Mask position through which light from `led_pos` reaches `pd_pos`.
pub fn mask_window_center(led_pos: Point, pd_pos: Point, m: f64) -> Result<Point> {
    if !(m > 1.0) {
        return Err(Error::InvalidGeometry(format!("magnification {m} must exceed 1")));
    }
    Ok(Point::new(
        led_pos.x + (pd_pos.x - led_pos.x) / m,
        led_pos.y + (pd_pos.y - led_pos.y) / m,
    ))
}

/// Where a ray from `led_pos` through `amp_pos` lands on the PD plane.
pub fn forward_map(led_pos: Point, amp_pos: Point, m: f64) -> Point {
    Point::new(
        led_pos.x + m * (amp_pos.x - led_pos.x),
        led_pos.y + m * (amp_pos.y - led_pos.y),
    )
}

/// Round-to-nearest onto `levels` uniform steps of [0, 1].
pub fn quantize(value: f64, levels: u32) -> f64 {
    let steps = (levels - 1) as f64;
    (value.clamp(0.0, 1.0) * steps).round() / steps
}

/// Axis-aligned block of mask pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub width: i64,
    pub height: i64,
}

impl PixelRect {
    pub fn area(&self) -> i64 {
        self.width * self.height
    }

    pub fn overlaps(&self, other: &PixelRect) -> bool {
        self.x0 < other.x0 + other.width
            && other.x0 < self.x0 + self.width
            && self.y0 < other.y0 + other.height
            && other.y0 < self.y0 + self.height
    }

    pub fn shifted(&self, dx: i32, dy: i32) -> PixelRect {
        PixelRect { x0: self.x0 + dx as i64, y0: self.y0 + dy as i64, ..*self }
    }

    fn inside(&self, mask: &MaskPlane) -> bool {
        self.x0 >= 0
            && self.y0 >= 0
            && self.x0 + self.width <= mask.width as i64
            && self.y0 + self.height <= mask.height as i64
    }

    /// Physical bounds `(x_min, x_max, y_min, y_max)`.
    pub fn bounds(&self, mask: &MaskPlane) -> (f64, f64, f64, f64) {
        let a = mask.to_physical(self.x0 as f64, (self.y0 + self.height) as f64);
        let b = mask.to_physical((self.x0 + self.width) as f64, self.y0 as f64);
        (a.x, b.x, a.y, b.y)
    }

    /// Pixels whose centres fall in the physical square of side `extent`
    /// centred on `center`.
    pub fn covering(center: Point, extent: f64, mask: &MaskPlane) -> PixelRect {
        let (fx, fy) = mask.to_pixel(center);
        let half = 0.5 * extent / mask.pixel_pitch;
        let span = |c: f64| {
            let lo = (c - half - 0.5).ceil() as i64;
            let hi = (c + half - 0.5).ceil() as i64;
            (lo, (hi - lo).max(0))
        };
        let (x0, width) = span(fx);
        let (y0, height) = span(fy);
        PixelRect { x0, y0, width, height }
    }
}

/// Per-window integer pixel shifts, indexed `led * n_detectors + pd`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftMap {
    pub n_emitters: usize,
    pub n_detectors: usize,
    pub shifts: Vec<(i32, i32)>,
}

impl ShiftMap {
    pub fn zeros(n_emitters: usize, n_detectors: usize) -> Self {
        Self { n_emitters, n_detectors, shifts: vec![(0, 0); n_emitters * n_detectors] }
    }

    pub fn uniform(n_emitters: usize, n_detectors: usize, dx: i32, dy: i32) -> Self {
        Self { n_emitters, n_detectors, shifts: vec![(dx, dy); n_emitters * n_detectors] }
    }

    pub fn is_zero(&self) -> bool {
        self.shifts.iter().all(|&s| s == (0, 0))
    }
}

/// A rasterized amplitude mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMask {
    pub width: usize,
    pub height: usize,
    pub gray_levels: u32,
    pub n_emitters: usize,
    pub n_detectors: usize,
    /// Row-major transmission values in [0, 1]; zero outside windows.
    pub raster: Vec<f64>,
    /// Window of weight (i, j) at index `i * n_detectors + j`.
    pub windows: Vec<PixelRect>,
}

impl WeightMask {
    pub fn window(&self, led: usize, pd: usize) -> PixelRect {
        self.windows[led * self.n_detectors + pd]
    }

    #[inline]
    pub fn pixel(&self, px: i64, py: i64) -> f64 {
        if px < 0 || py < 0 || px >= self.width as i64 || py >= self.height as i64 {
            0.0
        } else {
            self.raster[py as usize * self.width + px as usize]
        }
    }

    /// Transmission at a physical point of the mask plane; zero outside the aperture.
    #[inline]
    pub fn transmission_at(&self, mask: &MaskPlane, p: Point) -> f64 {
        let (fx, fy) = mask.to_pixel(p);
        self.pixel(fx.floor() as i64, fy.floor() as i64)
    }

    /// Largest transmission inside a window.
    pub fn window_peak(&self, rect: &PixelRect) -> f64 {
        let mut peak = 0.0f64;
        for py in rect.y0..rect.y0 + rect.height {
            for px in rect.x0..rect.x0 + rect.width {
                peak = peak.max(self.pixel(px, py));
            }
        }
        peak
    }

    pub fn consistent_with(&self, geom: &StageGeometry) -> Result<()> {
        if self.width != geom.mask.width
            || self.height != geom.mask.height
            || self.n_emitters != geom.emitters.count()
            || self.n_detectors != geom.detectors.count()
        {
            return Err(Error::Shape(format!(
                "mask {}x{} for {}x{} weights does not match geometry {}x{} for {}x{}",
                self.width,
                self.height,
                self.n_emitters,
                self.n_detectors,
                geom.mask.width,
                geom.mask.height,
                geom.emitters.count(),
                geom.detectors.count()
            )));
        }
        Ok(())
    }

    /// Binary PGM (P5), 8- or 16-bit.
    pub fn write_pgm(&self, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&self.pgm_bytes(bit_depth)?)?;
        Ok(())
    }

    pub fn pgm_bytes(&self, bit_depth: u8) -> Result<Vec<u8>> {
        let maxval: u32 = match bit_depth {
            8 => 255,
            16 => 65535,
            other => return Err(Error::InvalidArgument(format!("unsupported PGM bit depth {other}"))),
        };
        let mut buf = format!("P5\n{} {}\n{}\n", self.width, self.height, maxval).into_bytes();
        for &t in &self.raster {
            let v = (t * maxval as f64).round() as u32;
            if maxval > 255 {
                buf.extend_from_slice(&(v as u16).to_be_bytes());
            } else {
                buf.push(v as u8);
            }
        }
        Ok(buf)
    }

    pub fn sidecar(&self, geom: &StageGeometry, shifts: Option<&ShiftMap>) -> MaskSidecar {
        let windows = (0..self.n_emitters)
            .flat_map(|i| (0..self.n_detectors).map(move |j| (i, j)))
            .map(|(i, j)| {
                let rect = self.window(i, j);
                let transmission = self.window_peak(&rect);
                WindowRecord {
                    led: i,
                    pd: j,
                    rect,
                    transmission,
                    level: (transmission * (self.gray_levels - 1) as f64).round() as u32,
                }
            })
            .collect();
        MaskSidecar {
            format: "optonet-mask".into(),
            version: 1,
            geometry: geom.clone(),
            gray_levels: self.gray_levels,
            quantization_step: 1.0 / (self.gray_levels - 1) as f64,
            window_extent_um: geom.window_extent(),
            magnification: geom.magnification(),
            windows,
            shifts: shifts.cloned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub led: usize,
    pub pd: usize,
    pub rect: PixelRect,
    pub transmission: f64,
    pub level: u32,
}

/// JSON metadata written next to a mask raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub format: String,
    pub version: u32,
    pub geometry: StageGeometry,
    pub gray_levels: u32,
    pub quantization_step: f64,
    pub window_extent_um: f64,
    pub magnification: f64,
    pub windows: Vec<WindowRecord>,
    pub shifts: Option<ShiftMap>,
}

/// Window rectangles for every weight, after optional shifts.
pub fn layout_windows(geom: &StageGeometry, shifts: Option<&ShiftMap>) -> Result<Vec<PixelRect>> {
    geom.validate()?;
    let (n, p) = (geom.emitters.count(), geom.detectors.count());
    if let Some(s) = shifts {
        if s.n_emitters != n || s.n_detectors != p || s.shifts.len() != n * p {
            return Err(Error::Shape("shift map does not match the geometry".into()));
        }
    }
    let extent = geom.window_extent();
    let mut rects = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            let mut rect = PixelRect::covering(geom.window_center(i, j), extent, &geom.mask);
            if let Some(s) = shifts {
                let (dx, dy) = s.shifts[i * p + j];
                rect = rect.shifted(dx, dy);
            }
            if rect.area() == 0 {
                return Err(Error::InvalidGeometry(format!(
                    "window extent {extent:.1} um covers no pixel centre of a {} um mask",
                    geom.mask.pixel_pitch
                )));
            }
            if !rect.inside(&geom.mask) {
                return Err(Error::OutOfAperture { window: (i, j) });
            }
            rects.push(rect);
        }
    }
    Ok(rects)
}

/// First pair of windows sharing a pixel, checked on the raster grid.
pub fn find_overlap(rects: &[PixelRect], mask: &MaskPlane, p: usize) -> Option<((usize, usize), (usize, usize))> {
    let mut owner = vec![u32::MAX; mask.width * mask.height];
    for (k, r) in rects.iter().enumerate() {
        for py in r.y0..r.y0 + r.height {
            for px in r.x0..r.x0 + r.width {
                if px < 0 || py < 0 || px >= mask.width as i64 || py >= mask.height as i64 {
                    continue;
                }
                let cell = &mut owner[py as usize * mask.width + px as usize];
                if *cell != u32::MAX {
                    let prev = *cell as usize;
                    return Some(((prev / p, prev % p), (k / p, k % p)));
                }
                *cell = k as u32;
            }
        }
    }
    None
}

/// Rasterizes `weights` (emitters x detectors, values in [0, 1]) into a mask.
pub fn compile_mask(weights: &Array2<f64>, geom: &StageGeometry) -> Result<WeightMask> {
    compile_mask_shifted(weights, geom, None)
}

pub fn compile_mask_shifted(
    weights: &Array2<f64>,
    geom: &StageGeometry,
    shifts: Option<&ShiftMap>,
) -> Result<WeightMask> {
    let (n, p) = (geom.emitters.count(), geom.detectors.count());
    if weights.dim() != (n, p) {
        return Err(Error::Shape(format!(
            "weights are {:?} but the stage has {n} emitters and {p} detectors",
            weights.dim()
        )));
    }
    if let Some(((i, j), w)) = weights
        .indexed_iter()
        .find(|(_, w)| !(0.0..=1.0).contains(*w))
    {
        return Err(Error::Domain(format!("weight ({i}, {j}) = {w} outside [0, 1]")));
    }
    let rects = layout_windows(geom, shifts)?;
    if let Some((first, second)) = find_overlap(&rects, &geom.mask, p) {
        return Err(Error::LayoutInfeasible { first, second });
    }
    let (width, height) = (geom.mask.width, geom.mask.height);
    let mut raster = vec![0.0; width * height];
    for (k, r) in rects.iter().enumerate() {
        let t = quantize(weights[[k / p, k % p]], geom.mask.gray_levels);
        for py in r.y0..r.y0 + r.height {
            let row = py as usize * width;
            for px in r.x0..r.x0 + r.width {
                raster[row + px as usize] = t;
            }
        }
    }
    Ok(WeightMask {
        width,
        height,
        gray_levels: geom.mask.gray_levels,
        n_emitters: n,
        n_detectors: p,
        raster,
        windows: rects,
    })
}

/// PD-level crosstalk matrix estimated by Monte Carlo ray tracing.
///
/// Entry (j, k) is the fraction of the power passing window (i, j) that
/// lands on PD k, averaged over emitters i. Every window is traced fully
/// open, whatever its weight on `mask`; `mask` only supplies the layout.
pub fn crosstalk_matrix(
    geom: &StageGeometry,
    mask: &WeightMask,
    rays_per_led: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    crosstalk_matrix_with(geom, mask, rays_per_led, seed, Execution::Parallel)
}

pub fn crosstalk_matrix_with(
    geom: &StageGeometry,
    mask: &WeightMask,
    rays_per_led: usize,
    seed: u64,
    exec: Execution,
) -> Result<Array2<f64>> {
    if rays_per_led == 0 {
        return Err(Error::InvalidArgument("crosstalk estimation needs at least one ray".into()));
    }
    geom.validate()?;
    mask.consistent_with(geom)?;
    let (n, p) = (geom.emitters.count(), geom.detectors.count());
    let per_window = (rays_per_led / p).max(1);
    let tallies = exec.map(n, |i| {
        let mut rng = crate::seed::rng(crate::seed::derive(seed, i as u64));
        (0..p)
            .map(|j| {
                crate::optics::raytrace::trace_window(
                    geom,
                    &crate::optics::raytrace::Transmission::Open,
                    i,
                    &mask.window(i, j),
                    per_window,
                    &mut rng,
                )
            })
            .collect::<Vec<_>>()
    });
    let mut out = Array2::zeros((p, p));
    for per_led in &tallies {
        for (j, tally) in per_led.iter().enumerate() {
            if tally.through > 0.0 {
                for k in 0..p {
                    out[[j, k]] += tally.per_detector[k] / tally.through;
                }
            }
        }
    }
    out /= n as f64;
    Ok(out)
}

/// CDF at `x` of the sum of two centred uniforms of widths `a` and `b`.
pub(crate) fn box_sum_cdf(x: f64, a: f64, b: f64) -> f64 {
    let (a, b) = if a >= b { (a, b) } else { (b, a) };
    if a <= 0.0 {
        return if x >= 0.0 { 1.0 } else { 0.0 };
    }
    if b <= 1e-12 * a {
        return ((x + 0.5 * a) / a).clamp(0.0, 1.0);
    }
    let ramp = |t: f64| if t > 0.0 { 0.5 * t * t } else { 0.0 };
    let (s, d) = (0.5 * (a + b), 0.5 * (a - b));
    ((ramp(x + s) - ramp(x + d) - ramp(x - d) + ramp(x - s)) / (a * b)).clamp(0.0, 1.0)
}

/// Paraxial geometric model of the light spot a single window throws on
/// the PD plane.
///
/// A point of the die at `u` and a point of the window at `m` land at
/// `M m - (M - 1) u`, so the spot of a uniformly lit window is the
/// convolution of the window magnified by M with the die magnified by
/// M - 1, separable in x and y. Radiometric falloff across a single window
/// is neglected.
#[derive(Clone, Debug)]
pub struct SpotModel<'a> {
    geom: &'a StageGeometry,
}

/// Fraction of a window's light landing on each detector.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotCapture {
    pub per_detector: Vec<f64>,
}

impl<'a> SpotModel<'a> {
    pub fn new(geom: &'a StageGeometry) -> Self {
        Self { geom }
    }

    /// Spot cast by the physical window `[x0, x1] x [y0, y1]` lit by `led`,
    /// displaced by `offset` on the PD plane.
    pub fn capture(&self, led: usize, window: (f64, f64, f64, f64), offset: Point) -> SpotCapture {
        let g = self.geom;
        let m = g.magnification();
        let src = g.emitters.position(led);
        let (x0, x1, y0, y1) = window;
        let cx = m * 0.5 * (x0 + x1) - (m - 1.0) * src.x + offset.x;
        let cy = m * 0.5 * (y0 + y1) - (m - 1.0) * src.y + offset.y;
        let (ax, ay) = (m * (x1 - x0), m * (y1 - y0));
        let b = (m - 1.0) * g.emitters.die_size;
        let half = 0.5 * g.detectors.active_size;
        let det = &g.detectors;
        let fx: Vec<f64> = (0..det.cols)
            .map(|c| {
                let pos = det.position(c).x;
                box_sum_cdf(pos + half - cx, ax, b) - box_sum_cdf(pos - half - cx, ax, b)
            })
            .collect();
        let fy: Vec<f64> = (0..det.rows)
            .map(|r| {
                let pos = det.position(r * det.cols).y;
                box_sum_cdf(pos + half - cy, ay, b) - box_sum_cdf(pos - half - cy, ay, b)
            })
            .collect();
        let per_detector = (0..det.count())
            .map(|k| fy[k / det.cols] * fx[k % det.cols])
            .collect();
        SpotCapture { per_detector }
    }

    /// Capture for the unrasterized window of weight (led, pd).
    pub fn ideal_capture(&self, led: usize, pd: usize, offset: Point) -> SpotCapture {
        let c = self.geom.window_center(led, pd);
        let h = 0.5 * self.geom.window_extent();
        self.capture(led, (c.x - h, c.x + h, c.y - h, c.y + h), offset)
    }
}

/// Fast PD-level crosstalk matrix from the separable spot model, with every
/// spot displaced by `shift` (in units of the detector pitch).
pub fn crosstalk_approx(geom: &StageGeometry, shift: Point) -> Array2<f64> {
    let (n, p) = (geom.emitters.count(), geom.detectors.count());
    let model = SpotModel::new(geom);
    let offset = Point::new(shift.x * geom.detectors.pitch, shift.y * geom.detectors.pitch);
    let mut out = Array2::zeros((p, p));
    for i in 0..n {
        for j in 0..p {
            let cap = model.ideal_capture(i, j, offset);
            for (k, v) in cap.per_detector.iter().enumerate() {
                out[[j, k]] += v;
            }
        }
    }
    out / n as f64
}

/// Fraction of a window's light that the geometric spot puts outside its
/// target detector, for the window of weight (led, pd).
pub fn geometric_leakage(geom: &StageGeometry, led: usize, pd: usize) -> f64 {
    let cap = SpotModel::new(geom).ideal_capture(led, pd, Point::default());
    1.0 - cap.per_detector[pd]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn magnification_examples() {
        assert_eq!(magnification(10_000.0, 10_000.0).unwrap(), 2.0);
        assert_eq!(magnification(10_000.0, 30_000.0).unwrap(), 4.0);
        assert!((magnification(1.0, 1e-12).unwrap() - 1.0).abs() < 1e-11);
        assert!(matches!(magnification(0.0, 1.0), Err(Error::InvalidGeometry(_))));
        assert!(matches!(magnification(1.0, -1.0), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn window_center_examples() {
        let c = mask_window_center(Point::new(0.0, 0.0), Point::new(4000.0, 0.0), 4.0).unwrap();
        assert_eq!(c, Point::new(1000.0, 0.0));
        let c = mask_window_center(Point::new(3.0, -7.0), Point::new(3.0, -7.0), 2.5).unwrap();
        assert_eq!(c, Point::new(3.0, -7.0));
        let c = mask_window_center(Point::new(1000.0, 1000.0), Point::new(3000.0, 5000.0), 2.0).unwrap();
        assert_eq!(c, Point::new(2000.0, 3000.0));
        assert!(mask_window_center(Point::default(), Point::default(), 1.0).is_err());
    }

    #[test]
    fn paper_geometry_compiles_without_overlap() {
        let geom = StageGeometry::paper_input();
        let w = Array2::ones((64, 100));
        let mask = compile_mask(&w, &geom).unwrap();
        assert_eq!(mask.windows.len(), 6400);
        assert!(find_overlap(&mask.windows, &geom.mask, 100).is_none());
        for stage in StageGeometry::paper_stack() {
            let n = stage.emitters.count();
            let p = stage.detectors.count();
            compile_mask(&Array2::from_elem((n, p), 0.5), &stage).unwrap();
        }
    }

    #[test]
    fn single_dark_weight() {
        let mut geom = StageGeometry::paper_input();
        geom.emitters.rows = 1;
        geom.emitters.cols = 1;
        geom.detectors.rows = 1;
        geom.detectors.cols = 1;
        let mask = compile_mask(&Array2::zeros((1, 1)), &geom).unwrap();
        assert_eq!(mask.windows.len(), 1);
        assert!(mask.windows[0].area() > 0);
        assert!(mask.raster.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn crowded_detectors_are_infeasible() {
        let mut geom = StageGeometry::paper_input();
        // Windows are ~210 um wide; at M = 3 a 300 um PD pitch puts them 100 um apart.
        geom.detectors.pitch = 300.0;
        geom.detectors.active_size = 300.0;
        let err = compile_mask(&Array2::ones((64, 100)), &geom).unwrap_err();
        match err {
            Error::LayoutInfeasible { first, second } => assert_ne!(first, second),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aperture_violation() {
        let mut geom = StageGeometry::paper_input();
        geom.emitters.pitch = 8000.0;
        assert!(matches!(
            compile_mask(&Array2::ones((64, 100)), &geom),
            Err(Error::OutOfAperture { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_weights() {
        let geom = StageGeometry::paper_input();
        let mut w = Array2::from_elem((64, 100), 0.5);
        w[[3, 4]] = 1.5;
        assert!(matches!(compile_mask(&w, &geom), Err(Error::Domain(_))));
        assert!(matches!(compile_mask(&Array2::zeros((3, 3)), &geom), Err(Error::Shape(_))));
    }

    #[test]
    fn round_trip_within_one_pixel() {
        let geom = StageGeometry::paper_input();
        let mask = compile_mask(&Array2::ones((64, 100)), &geom).unwrap();
        let m = geom.magnification();
        for (k, r) in mask.windows.iter().enumerate() {
            let (i, j) = (k / 100, k % 100);
            let (x0, x1, y0, y1) = r.bounds(&geom.mask);
            let centre = Point::new(0.5 * (x0 + x1), 0.5 * (y0 + y1));
            let land = forward_map(geom.emitters.position(i), centre, m);
            let pd = geom.detectors.position(j);
            // One mask pixel maps to M pixels of displacement on the PD plane.
            let tol = geom.mask.pixel_pitch * m;
            assert!((land.x - pd.x).abs() <= tol && (land.y - pd.y).abs() <= tol);
        }
    }

    #[test]
    fn detector_lookup() {
        let det = StageGeometry::paper_input().detectors;
        for k in 0..det.count() {
            assert_eq!(det.locate(det.position(k)), Some(k));
        }
        let p = det.position(0);
        assert_eq!(det.locate(Point::new(p.x + 0.5 * det.pitch, p.y)), None);
    }

    #[test]
    fn box_sum_cdf_limits() {
        assert!((box_sum_cdf(0.0, 2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(box_sum_cdf(-1.5, 2.0, 1.0), 0.0);
        assert_eq!(box_sum_cdf(1.5, 2.0, 1.0), 1.0);
        // Inside the flat top the CDF is that of the wider box.
        assert!((box_sum_cdf(0.25, 2.0, 1.0) - 0.625).abs() < 1e-15);
        assert!((box_sum_cdf(0.25, 2.0, 0.0) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn pgm_header_and_depths() {
        let geom = StageGeometry::paper_input();
        let mask = compile_mask(&Array2::from_elem((64, 100), 1.0), &geom).unwrap();
        let bytes = mask.pgm_bytes(8).unwrap();
        let header = b"P5\n1024 768\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 1024 * 768);
        let bytes16 = mask.pgm_bytes(16).unwrap();
        assert_eq!(bytes16.len(), b"P5\n1024 768\n65535\n".len() + 2 * 1024 * 768);
        assert!(mask.pgm_bytes(12).is_err());
    }
}
