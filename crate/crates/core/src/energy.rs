//! Accelerator scaling model: operation counting, read-in amortization,
//! performance per watt and the diffraction bound on array size.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::optics::diffraction::{separable_leakage, slit_propagate, DiffractionConfig, PhaseModel, Slit};
use crate::seed;
use crate::{Error, Result};

/// Component power budget of the accelerator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModel {
    /// Average drive power per LED, W.
    pub led_power_w: f64,
    /// Analog power per receiver channel, W.
    pub rx_power_w: f64,
    /// Energy per ADC or DAC sample, J.
    pub conversion_energy_j: f64,
    /// Overhead per board (layer), W.
    pub static_power_w: f64,
    pub clock_hz: f64,
    pub ops_per_mac: f64,
}

impl Default for EnergyModel {
    /// Budget fitted by [`fit_budget`] to the published operating points and
    /// frozen here.
    fn default() -> Self {
        Self {
            led_power_w: 0.0,
            rx_power_w: 0.0,
            conversion_energy_j: FITTED_CONVERSION_J,
            static_power_w: FITTED_STATIC_W,
            clock_hz: 500e3,
            ops_per_mac: 2.0,
        }
    }
}

const FITTED_CONVERSION_J: f64 = 5.688_541_426_489_049e-12;
const FITTED_STATIC_W: f64 = 0.175_662_607_724_621_14;

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.led_power_w, self.rx_power_w, self.conversion_energy_j, self.static_power_w];
        if parts.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidModel("powers and energies must be finite and nonnegative".into()));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) || !(self.ops_per_mac > 0.0) {
            return Err(Error::InvalidModel("clock and ops per MAC must be positive".into()));
        }
        Ok(())
    }
}

/// LED and PD grids of one optical layer, as (rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGrid {
    pub led: (usize, usize),
    pub pd: (usize, usize),
}

impl LayerGrid {
    pub fn n_led(&self) -> usize {
        self.led.0 * self.led.1
    }

    pub fn n_pd(&self) -> usize {
        self.pd.0 * self.pd.1
    }

    /// N x N photodiodes fed by (N/2) x N LEDs.
    pub fn square(n: usize) -> Self {
        Self { led: ((n / 2).max(1), n), pd: (n, n) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorConfig {
    pub layers: Vec<LayerGrid>,
    /// Board edge length, um.
    pub board_size: f64,
    /// um.
    pub wavelength: f64,
}

impl AcceleratorConfig {
    /// `layers` identical layers with an N x N PD grid.
    pub fn uniform(layers: usize, grid: usize) -> Self {
        Self { layers: vec![LayerGrid::square(grid); layers], board_size: 5_600.0, wavelength: 0.525 }
    }

    /// Single board with 4 x 8 LEDs and 8 x 8 PDs.
    pub fn prototype() -> Self {
        Self::uniform(1, 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("accelerator needs at least one layer".into()));
        }
        if self.layers.iter().any(|l| l.n_led() == 0 || l.n_pd() == 0) {
            return Err(Error::InvalidArgument("every grid must be at least 1 x 1".into()));
        }
        Ok(())
    }

    /// Conversions per sample: inputs read in at the first layer and
    /// outputs read out at the last.
    pub fn conversions(&self) -> usize {
        self.layers[0].n_led() + self.layers[self.layers.len() - 1].n_pd()
    }
}

/// Operations per sample: `ops_per_mac * n_led * n_pd` summed over layers.
pub fn ops_per_cycle(cfg: &AcceleratorConfig, model: &EnergyModel) -> f64 {
    cfg.layers.iter().map(|l| model.ops_per_mac * (l.n_led() * l.n_pd()) as f64).sum()
}

/// Operations per read-in or read-out conversion.
pub fn ops_per_readin(cfg: &AcceleratorConfig, model: &EnergyModel) -> f64 {
    ops_per_cycle(cfg, model) / cfg.conversions() as f64
}

/// Total electrical power in W.
pub fn power(cfg: &AcceleratorConfig, model: &EnergyModel) -> f64 {
    let optics: f64 = cfg
        .layers
        .iter()
        .map(|l| l.n_led() as f64 * model.led_power_w + l.n_pd() as f64 * model.rx_power_w)
        .sum();
    optics
        + cfg.layers.len() as f64 * model.static_power_w
        + model.conversion_energy_j * model.clock_hz * cfg.conversions() as f64
}

/// Throughput over power, OPS/W.
pub fn perf_per_watt(cfg: &AcceleratorConfig, model: &EnergyModel) -> Result<f64> {
    cfg.validate()?;
    model.validate()?;
    let p = power(cfg, model);
    if !(p > 0.0) {
        return Err(Error::InvalidModel("total power is zero".into()));
    }
    Ok(ops_per_cycle(cfg, model) * model.clock_hz / p)
}

/// A published efficiency the budget has to reproduce.
#[derive(Clone, Debug, PartialEq)]
pub enum Anchor {
    /// OPS/W of `cfg` at `clock_hz`.
    Point { cfg: AcceleratorConfig, clock_hz: f64, ops_per_watt: f64 },
    /// OPS/W of `cfg` as the clock grows without bound.
    Ceiling { cfg: AcceleratorConfig, ops_per_watt: f64 },
}

/// The three published operating points: the 8 x 8 prototype at 500 kHz,
/// 32 x 32 arrays at 500 kHz, and the high-frequency ceiling of the latter.
pub fn published_anchors() -> Vec<Anchor> {
    vec![
        Anchor::Point { cfg: AcceleratorConfig::prototype(), clock_hz: 500e3, ops_per_watt: 11.61e9 },
        Anchor::Point { cfg: AcceleratorConfig::uniform(1, 32), clock_hz: 500e3, ops_per_watt: 2.92e12 },
        Anchor::Ceiling { cfg: AcceleratorConfig::uniform(1, 32), ops_per_watt: 120e12 },
    ]
}

/// Relative residual rows `r(theta) = A theta / b - 1` over
/// `theta = (led_power_w, rx_power_w, static_power_w, conversion_energy_j)`.
fn anchor_rows(anchors: &[Anchor], ops_per_mac: f64) -> Vec<([f64; 4], f64)> {
    let probe = EnergyModel { ops_per_mac, ..EnergyModel::default() };
    anchors
        .iter()
        .map(|a| match a {
            Anchor::Point { cfg, clock_hz, ops_per_watt } => {
                let target = ops_per_cycle(cfg, &probe) * clock_hz / ops_per_watt;
                let leds: f64 = cfg.layers.iter().map(|l| l.n_led() as f64).sum();
                let pds: f64 = cfg.layers.iter().map(|l| l.n_pd() as f64).sum();
                let row = [leds, pds, cfg.layers.len() as f64, clock_hz * cfg.conversions() as f64];
                (row.map(|v| v / target), 1.0)
            }
            Anchor::Ceiling { cfg, ops_per_watt } => {
                let target = ops_per_cycle(cfg, &probe) / ops_per_watt;
                ([0.0, 0.0, 0.0, cfg.conversions() as f64 / target], 1.0)
            }
        })
        .collect()
}

/// Least squares over the columns in `active`, by normal equations.
fn solve_subset(rows: &[([f64; 4], f64)], active: &[usize]) -> Option<Vec<f64>> {
    let k = active.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (row, b) in rows {
        for (r, &i) in active.iter().enumerate() {
            for (c, &j) in active.iter().enumerate() {
                a[r][c] += row[i] * row[j];
            }
            a[r][k] += row[i] * b;
        }
    }
    for col in 0..k {
        let pivot = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                let pivot_row = a[col].clone();
                for (x, p) in a[r][col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    Some((0..k).map(|r| a[r][k] / a[r][r]).collect())
}

/// Nonnegative least-squares fit of the budget to `anchors`, minimizing
/// the summed squared relative errors. Exhausts all supports, which is
/// exact for four unknowns.
pub fn fit_budget(anchors: &[Anchor], ops_per_mac: f64) -> Result<EnergyModel> {
    let rows = anchor_rows(anchors, ops_per_mac);
    let mut best: Option<(f64, [f64; 4])> = None;
    for mask in 1u32..16 {
        let active: Vec<usize> = (0..4).filter(|b| mask >> b & 1 == 1).collect();
        let Some(sol) = solve_subset(&rows, &active) else { continue };
        if sol.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut theta = [0.0; 4];
        active.iter().zip(&sol).for_each(|(&i, &v)| theta[i] = v);
        let cost: f64 = rows
            .iter()
            .map(|(row, b)| (row.iter().zip(&theta).map(|(x, t)| x * t).sum::<f64>() - b).powi(2))
            .sum();
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, theta));
        }
    }
    let (_, t) = best.ok_or_else(|| Error::InvalidModel("no nonnegative budget fits the anchors".into()))?;
    Ok(EnergyModel {
        led_power_w: t[0],
        rx_power_w: t[1],
        static_power_w: t[2],
        conversion_energy_j: t[3],
        clock_hz: 500e3,
        ops_per_mac,
    })
}

/// One row of a scaling sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: &'static str,
    pub grid_size: usize,
    pub layers: usize,
    pub clock_hz: f64,
    pub ops_per_cycle: f64,
    pub ops_per_readin: f64,
    pub power_w: f64,
    pub ops_per_watt: f64,
}

fn row(sweep: &'static str, grid: usize, layers: usize, model: &EnergyModel) -> Result<SweepRow> {
    let cfg = AcceleratorConfig::uniform(layers, grid);
    Ok(SweepRow {
        sweep,
        grid_size: grid,
        layers,
        clock_hz: model.clock_hz,
        ops_per_cycle: ops_per_cycle(&cfg, model),
        ops_per_readin: ops_per_readin(&cfg, model),
        power_w: power(&cfg, model),
        ops_per_watt: perf_per_watt(&cfg, model)?,
    })
}

/// Array-size, layer-count and clock sweeps around `model`.
pub fn scaling_sweeps(model: &EnergyModel) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for grid in (4..=64).step_by(4) {
        rows.push(row("grid", grid, 1, model)?);
    }
    for layers in 1..=8 {
        rows.push(row("layers", 8, layers, model)?);
    }
    for decade in 0..=40 {
        let clock = 1e4 * 10f64.powf(decade as f64 / 5.0);
        rows.push(row("clock", 32, 1, &EnergyModel { clock_hz: clock, ..*model })?);
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sweep,grid_size,layers,clock_hz,ops_per_cycle,ops_per_readin,power_w,ops_per_watt")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.sweep, r.grid_size, r.layers, r.clock_hz, r.ops_per_cycle, r.ops_per_readin, r.power_w, r.ops_per_watt
        )?;
    }
    Ok(())
}

/// Self-similar family of single-window geometries at a fixed board size:
/// all lateral dimensions of the reference board scale by `reference / N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySweep {
    /// Grid size (PDs per axis) of the reference dimensions below.
    pub reference_grid: usize,
    pub pd_pitch: f64,
    pub active_size: f64,
    pub die_size: f64,
    pub d1: f64,
    pub d2: f64,
    pub guard_fraction: f64,
    pub sizes: Vec<usize>,
    /// Excess leakage counted as significant.
    pub threshold: f64,
    pub realizations: usize,
    pub max_grid: usize,
}

impl Default for ArraySweep {
    fn default() -> Self {
        Self {
            reference_grid: 8,
            pd_pitch: 700.0,
            active_size: 600.0,
            die_size: 50.0,
            d1: 2_000.0,
            d2: 4_000.0,
            guard_fraction: 0.1,
            sizes: (8..=64).step_by(8).collect(),
            threshold: 0.1,
            realizations: 256,
            max_grid: 2048,
        }
    }
}

impl ArraySweep {
    /// Slit of one window at grid size `n`.
    pub fn slit(&self, n: usize) -> Slit {
        let s = self.reference_grid as f64 / n as f64;
        let (die, active) = (self.die_size * s, self.active_size * s);
        let m = (self.d1 + self.d2) / self.d1;
        let window = (1.0 - self.guard_fraction) * (die + (active - die) / m);
        Slit { die, window, active, d1: self.d1, d2: self.d2 }
    }

    /// Board edge implied by the reference grid.
    pub fn board_size(&self) -> f64 {
        self.reference_grid as f64 * self.pd_pitch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayLimit {
    pub sizes: Vec<usize>,
    /// Two-dimensional leakage beyond the geometric prediction, per size.
    pub excess_leakage: Vec<f64>,
    pub geometric_leakage: Vec<f64>,
    /// First size whose excess leakage exceeds the threshold.
    pub limit: Option<usize>,
}

impl ArrayLimit {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "grid_size,excess_leakage,geometric_leakage")?;
        for ((n, e), g) in self.sizes.iter().zip(&self.excess_leakage).zip(&self.geometric_leakage) {
            writeln!(out, "{n},{e},{g}")?;
        }
        Ok(())
    }
}

/// Sweeps grid size at fixed board size, propagating one representative
/// window with the slit solver, and reports where diffraction leakage
/// beyond the geometric spot first exceeds the threshold.
pub fn diffraction_array_limit(sweep: &ArraySweep, wavelength: f64, seed: u64, exec: Execution) -> Result<ArrayLimit> {
    if sweep.sizes.is_empty() || sweep.sizes.contains(&0) || !(wavelength > 0.0) {
        return Err(Error::InvalidArgument("sweep needs positive sizes and wavelength".into()));
    }
    let config = DiffractionConfig {
        wavelength,
        realizations: sweep.realizations,
        max_grid: sweep.max_grid,
        execution: Execution::Sequential,
        ..DiffractionConfig::default()
    };
    let results = exec.map(sweep.sizes.len(), |k| {
        let n = sweep.sizes[k];
        slit_propagate(&sweep.slit(n), &config, PhaseModel::Random, seed::derive(seed, n as u64)).map_err(|e| match e {
            Error::Aliasing { required, limit } => Error::Resource(format!(
                "grid size {n} needs about {required} samples per axis, above the limit of {limit}"
            )),
            other => other,
        })
    });
    let mut excess = Vec::new();
    let mut geometric = Vec::new();
    for r in results {
        let r = r?;
        let g = separable_leakage(r.geometric_leakage);
        excess.push(separable_leakage(r.leakage) - g);
        geometric.push(g);
    }
    let limit = sweep.sizes.iter().zip(&excess).find(|(_, e)| **e > sweep.threshold).map(|(n, _)| *n);
    Ok(ArrayLimit { sizes: sweep.sizes.clone(), excess_leakage: excess, geometric_leakage: geometric, limit })
}
