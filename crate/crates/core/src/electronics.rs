//! Analog neuron circuit: paired photodetection, differencing with gain and
//! offset, LED drive, bandwidth and noise.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::optics::DetectorSignal;
use crate::seed;
use crate::{Error, Result};

/// Elementary charge in coulombs.
const ELECTRON_CHARGE: f64 = 1.602_176_634e-19;

/// LED drive-to-intensity response. Zero for nonpositive drive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LedCurve {
    #[default]
    Identity,
    /// `s * (1 - exp(-x / s))` with saturation scale `s`.
    Saturating { scale: f64 },
}

impl LedCurve {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LedCurve::Identity => Ok(()),
            LedCurve::Saturating { scale } if scale > 0.0 => Ok(()),
            LedCurve::Saturating { scale } => {
                Err(Error::InvalidArgument(format!("saturation scale {scale} must be positive")))
            }
        }
    }

    #[inline]
    pub fn apply(&self, drive: f64) -> f64 {
        if drive <= 0.0 {
            return 0.0;
        }
        match *self {
            LedCurve::Identity => drive,
            LedCurve::Saturating { scale } => scale * -(-drive / scale).exp_m1(),
        }
    }

    /// Derivative with respect to the drive.
    #[inline]
    pub fn slope(&self, drive: f64) -> f64 {
        if drive <= 0.0 {
            return 0.0;
        }
        match *self {
            LedCurve::Identity => 1.0,
            LedCurve::Saturating { scale } => (-drive / scale).exp(),
        }
    }
}

pub fn apply_led_nonlinearity(drive: f64, curve: &LedCurve) -> f64 {
    curve.apply(drive)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronCircuit {
    pub gain: f64,
    pub offset: f64,
    #[serde(default)]
    pub led_curve: LedCurve,
    pub bandwidth_hz: f64,
}

impl Default for NeuronCircuit {
    fn default() -> Self {
        Self { gain: 1.0, offset: 0.0, led_curve: LedCurve::Identity, bandwidth_hz: 1.0e6 }
    }
}

impl NeuronCircuit {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) {
            return Err(Error::InvalidArgument(format!("neuron gain {} must be positive", self.gain)));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::InvalidArgument("neuron bandwidth must be positive".into()));
        }
        self.led_curve.validate()
    }
}

/// `led_curve(gain * (pd_pos - pd_neg) + offset)`.
pub fn differential_relu(pd_pos: f64, pd_neg: f64, circuit: &NeuronCircuit) -> Result<f64> {
    if !(pd_pos >= 0.0 && pd_neg >= 0.0) {
        return Err(Error::Domain(format!("photodiode powers ({pd_pos}, {pd_neg}) must be nonnegative")));
    }
    Ok(circuit.led_curve.apply(circuit.gain * (pd_pos - pd_neg) + circuit.offset))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettleReport {
    pub settled: bool,
    pub residual: f64,
}

/// Half-period settling of a first-order low-pass stage.
pub fn settle_check(clock_hz: f64, bandwidth_hz: f64, tolerance: f64) -> Result<SettleReport> {
    if !(clock_hz > 0.0 && bandwidth_hz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "frequencies must be positive (clock {clock_hz}, bandwidth {bandwidth_hz})"
        )));
    }
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tolerance} must lie in (0, 1)")));
    }
    let residual = (-2.0 * std::f64::consts::PI * bandwidth_hz * 0.5 / clock_hz).exp();
    Ok(SettleReport { settled: residual <= tolerance, residual })
}

/// Detector noise law used for the minimum usable optical power.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    /// Noise-equivalent power: `P_min = snr * nep * sqrt(B)`.
    #[default]
    Nep,
    /// Shot-noise limited: `P_min = snr^2 * 2 q B / responsivity`.
    ShotNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// W / sqrt(Hz).
    pub nep: f64,
    pub relative_weight_sigma: f64,
    pub pd_additive_sigma: f64,
    /// Spread of per-neuron offsets.
    #[serde(default)]
    pub offset_sigma: f64,
    #[serde(default)]
    pub law: NoiseLaw,
    /// A / W, used by the shot-noise law.
    #[serde(default = "default_responsivity")]
    pub responsivity: f64,
    pub seed: u64,
}

fn default_responsivity() -> f64 {
    0.3
}

impl Default for NoiseSpec {
    /// Calibrated hardware defaults used by the noisy fidelity level.
    fn default() -> Self {
        Self {
            nep: 1.0e-12,
            relative_weight_sigma: 0.05,
            pd_additive_sigma: 0.01,
            offset_sigma: 0.02,
            law: NoiseLaw::Nep,
            responsivity: default_responsivity(),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self { relative_weight_sigma: 0.0, pd_additive_sigma: 0.0, offset_sigma: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.nep, self.relative_weight_sigma, self.pd_additive_sigma, self.offset_sigma];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("noise parameters must be finite and nonnegative".into()));
        }
        if !(self.responsivity > 0.0) {
            return Err(Error::InvalidArgument("responsivity must be positive".into()));
        }
        Ok(())
    }

    /// Per-weight factors `max(0, 1 + eps)`, drawn once per model instance.
    pub fn weight_factors(&self, n: usize, p: usize, instance: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed::derive_path(self.seed, &[instance, 1]));
        let dist = normal(self.relative_weight_sigma);
        Array2::from_shape_simple_fn((n, p), || (1.0 + dist.sample(&mut rng)).max(0.0))
    }

    /// Per-neuron offset perturbations, drawn once per model instance.
    pub fn offset_deltas(&self, neurons: usize, instance: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed::derive_path(self.seed, &[instance, 2]));
        let dist = normal(self.offset_sigma);
        (0..neurons).map(|_| dist.sample(&mut rng)).collect()
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated nonnegative")
}

/// `P_min` in watts for the configured noise law.
pub fn min_optical_power(bandwidth_hz: f64, noise: &NoiseSpec, snr_target: f64) -> Result<f64> {
    if !(bandwidth_hz > 0.0 && snr_target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth ({bandwidth_hz}) and SNR target ({snr_target}) must be positive"
        )));
    }
    noise.validate()?;
    Ok(match noise.law {
        NoiseLaw::Nep => snr_target * noise.nep * bandwidth_hz.sqrt(),
        NoiseLaw::ShotNoise => snr_target * snr_target * 2.0 * ELECTRON_CHARGE * bandwidth_hz / noise.responsivity,
    })
}

/// Adds Gaussian noise per PD and applies a fixed per-PD gain factor drawn
/// from the spec's own seed; results are clamped at zero.
pub fn apply_noise(signal: &DetectorSignal, noise: &NoiseSpec, seed: u64) -> Result<DetectorSignal> {
    noise.validate()?;
    let gains = noise.weight_factors(1, signal.values().len(), u64::MAX);
    let mut rng = seed::rng(seed::derive(noise.seed, seed));
    let add = normal(noise.pd_additive_sigma);
    let out = signal
        .values()
        .iter()
        .zip(gains.iter())
        .map(|(&v, &g)| (v * g + add.sample(&mut rng)).max(0.0))
        .collect();
    DetectorSignal::new(out)
}

/// Draws standard normal values; used where a raw stream is needed.
pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    let dist = normal(sigma);
    (0..n).map(|_| dist.sample(rng)).collect()
}
