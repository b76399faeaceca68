//! Strict TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use optonet::calibration::ExclusionTolerances;
use optonet::datasets::{Resampler, SpiralParams};
use optonet::electronics::{NeuronCircuit, NoiseSpec};
use optonet::energy::{ArraySweep, EnergyModel};
use optonet::geometry::{Point, StageGeometry};
use optonet::network::{Fidelity, LinearConfig, TrainConfig, Twin};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Parent of the timestamped run directories.
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    /// Falls back to the preset of the dataset kind.
    pub train: Option<TrainConfig>,
    pub linear: LinearConfig,
    pub twin: TwinConfig,
    pub infer: InferConfig,
    pub calibration: CalibrationConfig,
    pub energy: EnergyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            threads: None,
            paths: Paths::default(),
            dataset: DatasetConfig::default(),
            train: None,
            linear: LinearConfig::default(),
            twin: TwinConfig::default(),
            infer: InferConfig::default(),
            calibration: CalibrationConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding the MNIST IDX training files.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Spiral,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub resampler: Resampler,
    pub spiral: SpiralParams,
    /// Train and test parts of the split; 5:1 for MNIST, 4:1 for the spiral
    /// when unset.
    pub split: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwinConfig {
    pub stages: Vec<StageGeometry>,
    pub circuit: NeuronCircuit,
    pub noise: NoiseSpec,
    pub misalignment: Point,
}

impl Default for TwinConfig {
    fn default() -> Self {
        let t = Twin::default();
        Self { stages: t.stages, circuit: t.circuit, noise: t.noise, misalignment: t.misalignment }
    }
}

impl TwinConfig {
    pub fn twin(&self) -> Twin {
        Twin {
            stages: self.stages.clone(),
            circuit: self.circuit,
            noise: self.noise.clone(),
            misalignment: self.misalignment,
            traced: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub fidelities: Vec<Fidelity>,
    /// One noisy evaluation per seed.
    pub noise_seeds: Vec<u64>,
    /// Rays per LED when compiling the raytraced level.
    pub rays_per_led: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { fidelities: vec![Fidelity::Algebraic, Fidelity::Noisy], noise_seeds: vec![0, 1, 2], rays_per_led: 200_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Relative spread of the simulated per-weight gains.
    pub gain_sigma: f64,
    pub repeats: usize,
    pub tolerances: ExclusionTolerances,
    pub w_max: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { gain_sigma: 0.2, repeats: 1, tolerances: ExclusionTolerances::default(), w_max: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub model: EnergyModel,
    /// Also run the diffraction array-size sweep.
    pub diffraction: bool,
    /// um.
    pub wavelength: f64,
    pub array: ArraySweep,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { model: EnergyModel::default(), diffraction: false, wavelength: 0.525, array: ArraySweep::default() }
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if let Some(p) = &self.paths.checkpoint {
            if !p.is_file() {
                return bad(format!("paths.checkpoint: {} does not exist", p.display()));
            }
        }
        if let Some(d) = &self.paths.data_dir {
            if !d.is_dir() {
                return bad(format!("paths.data_dir: {} is not a directory", d.display()));
            }
        }
        if let Some([a, b]) = self.dataset.split {
            if a == 0 || b == 0 {
                return bad("dataset.split parts must be positive".into());
            }
        }
        if self.twin.stages.is_empty() {
            return bad("twin.stages must not be empty".into());
        }
        for (k, s) in self.twin.stages.iter().enumerate() {
            s.validate().map_err(|e| CliError::Validation(format!("twin.stages[{k}]: {e}")))?;
        }
        if !(0.0..1.0).contains(&self.calibration.gain_sigma) || self.calibration.repeats == 0 {
            return bad("calibration.gain_sigma must lie in [0, 1) and repeats be positive".into());
        }
        if self.infer.rays_per_led == 0 {
            return bad("infer.rays_per_led must be positive".into());
        }
        self.energy.model.validate().map_err(|e| CliError::Validation(format!("energy.model: {e}")))?;
        Ok(())
    }

    /// Fills the dataset-dependent defaults and pins every stage seed to the
    /// global one, so the snapshot replays the run exactly.
    pub fn resolved(mut self) -> Self {
        let preset = match self.dataset.kind {
            DatasetKind::Mnist => TrainConfig::default(),
            DatasetKind::Spiral => TrainConfig::spiral(),
        };
        let mut train = self.train.take().unwrap_or(preset);
        train.seed = self.seed;
        train.stages = self.twin.stages.clone();
        self.train = Some(train);
        self.linear.seed = self.seed;
        self.dataset.split.get_or_insert(match self.dataset.kind {
            DatasetKind::Mnist => [5, 1],
            DatasetKind::Spiral => [4, 1],
        });
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_str("seed = 3\n").unwrap();
        assert_eq!(cfg, RunConfig { seed: 3, ..RunConfig::default() });
        let partial = parse_str("[twin.noise]\nrelative_weight_sigma = 0.1\n").unwrap();
        assert_eq!(partial.twin.noise.relative_weight_sigma, 0.1);
        assert_eq!(partial.twin.noise.nep, NoiseSpec::default().nep);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_str("[twin.circuit]\ngian = 2.0\n").unwrap_err();
        assert!(matches!(&err, CliError::Validation(m) if m.contains("gian")), "{err}");
    }

    #[test]
    fn missing_checkpoint_is_rejected() {
        let err = parse_str("[paths]\ncheckpoint = \"/nonexistent/ckpt.json\"\n").unwrap_err();
        assert!(matches!(err, CliError::Validation(m) if m.contains("paths.checkpoint")));
    }

    #[test]
    fn effective_config_round_trips() {
        for kind in ["mnist", "spiral"] {
            let cfg = parse_str(&format!("seed = 9\n[dataset]\nkind = \"{kind}\"\n")).unwrap().resolved();
            let again = parse_str(&cfg.to_toml()).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(again.clone().resolved(), cfg);
        }
    }
}
