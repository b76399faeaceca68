//! Command implementations. Each writes its artifacts into the run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use optonet::calibration::{exclude_neurons, measure_weight_response, transfer_weights, ProbePlan, SystemModel};
use optonet::datasets::{encode_spiral, load_mnist_idx, mnist_pipeline, spiral_dataset, LabeledDataset};
use optonet::energy::{diffraction_array_limit, fit_budget, published_anchors, scaling_sweeps, write_sweep_csv};
use optonet::geometry::compile_mask;
use optonet::network::{evaluate, linear_baseline, train, Fidelity, HardwareNetwork};
use optonet::{seed, Execution};

use crate::config::{DatasetKind, RunConfig};
use crate::CliError;

type Res<T> = Result<T, CliError>;

fn tag(module: &'static str) -> impl FnOnce(optonet::Error) -> CliError {
    move |source| CliError::Runtime { module, source }
}

/// Train and test splits, the network inputs and the raw features for the
/// linear baseline.
pub struct Data {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub raw_train: LabeledDataset,
    pub raw_test: LabeledDataset,
}

pub fn load_data(cfg: &RunConfig) -> Res<Data> {
    let [a, b] = cfg.dataset.split.unwrap_or([5, 1]);
    match cfg.dataset.kind {
        DatasetKind::Mnist => {
            let dir = cfg.paths.data_dir.as_ref().ok_or_else(|| {
                CliError::Validation("MNIST needs paths.data_dir, --data-dir or OPTONET_DATA_DIR".into())
            })?;
            let (images, labels) = (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"));
            for f in [&images, &labels] {
                if !f.is_file() {
                    return Err(CliError::Validation(format!("missing MNIST file {}", f.display())));
                }
            }
            let raw = load_mnist_idx(images, labels).map_err(tag("datasets"))?;
            let ds = mnist_pipeline(&raw, cfg.dataset.resampler).map_err(tag("datasets"))?;
            let (train, test) = ds.split(a, b, cfg.seed);
            Ok(Data { raw_train: train.clone(), raw_test: test.clone(), train, test })
        }
        DatasetKind::Spiral => {
            let ds = spiral_dataset(&cfg.dataset.spiral, cfg.seed).map_err(tag("datasets"))?;
            let (raw_train, raw_test) = ds.split(a, b, cfg.seed);
            let encode = |d: &LabeledDataset| encode_spiral(d).and_then(|e| e.padded(64)).map_err(tag("datasets"));
            Ok(Data { train: encode(&raw_train)?, test: encode(&raw_test)?, raw_train, raw_test })
        }
    }
}

fn n_classes(cfg: &RunConfig) -> usize {
    match cfg.dataset.kind {
        DatasetKind::Mnist => 10,
        DatasetKind::Spiral => 4,
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Res<HardwareNetwork> {
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Validation("this command needs paths.checkpoint or --checkpoint".into()))?;
    Ok(HardwareNetwork::load(path).map_err(tag("network"))?.0)
}

/// `name,value` rows.
#[derive(Default)]
pub struct Metrics(Vec<(String, f64)>);

impl Metrics {
    fn push(&mut self, name: impl Into<String>, value: f64) {
        self.0.push((name.into(), value));
    }

    fn write(&self, dir: &Path) -> Res<()> {
        let mut s = String::from("name,value\n");
        for (n, v) in &self.0 {
            writeln!(s, "{n},{v}").expect("string write");
        }
        std::fs::write(dir.join("metrics.csv"), s)?;
        Ok(())
    }
}

pub fn prepare_data(cfg: &RunConfig, dir: &Path) -> Res<()> {
    let data = load_data(cfg)?;
    data.train.write_csv(dir.join("train.csv")).map_err(tag("datasets"))?;
    data.test.write_csv(dir.join("test.csv")).map_err(tag("datasets"))?;
    let mut m = Metrics::default();
    m.push("train_samples", data.train.len() as f64);
    m.push("test_samples", data.test.len() as f64);
    m.write(dir)
}

fn train_network(cfg: &RunConfig, data: &Data, dir: &Path, m: &mut Metrics) -> Res<HardwareNetwork> {
    let tc = cfg.train.clone().unwrap_or_default();
    let template = HardwareNetwork::paper(n_classes(cfg), cfg.seed).map_err(tag("network"))?;
    let out = train(&template, &data.train, Some(&data.test), &tc).map_err(tag("network"))?;
    out.write_loss_csv(dir.join("loss.csv")).map_err(tag("network"))?;
    let acc = out.history.last().and_then(|r| r.test_accuracy).unwrap_or(f64::NAN);
    m.push("train_epochs", tc.epochs as f64);
    m.push("accuracy_algebraic", acc);
    let meta = json!({ "dataset": cfg.dataset.kind, "seed": cfg.seed, "test_accuracy": acc });
    out.network.save(dir.join("checkpoint.json"), meta).map_err(tag("network"))?;
    Ok(out.network)
}

pub fn train_cmd(cfg: &RunConfig, dir: &Path) -> Res<()> {
    let data = load_data(cfg)?;
    let mut m = Metrics::default();
    train_network(cfg, &data, dir, &mut m)?;
    m.write(dir)
}

fn write_masks(cfg: &RunConfig, net: &HardwareNetwork, dir: &Path) -> Res<()> {
    net.fits(&cfg.twin.stages).map_err(tag("network"))?;
    for (l, (layer, geom)) in net.layers.iter().zip(&cfg.twin.stages).enumerate() {
        let mask = compile_mask(&layer.weights, geom).map_err(tag("geometry"))?;
        let depth = if geom.mask.gray_levels > 256 { 16 } else { 8 };
        mask.write_pgm(dir.join(format!("mask_{l}.pgm")), depth).map_err(tag("geometry"))?;
        let sidecar = serde_json::to_string_pretty(&mask.sidecar(geom, None)).map_err(optonet::Error::from).map_err(tag("geometry"))?;
        std::fs::write(dir.join(format!("mask_{l}.json")), sidecar)?;
    }
    Ok(())
}

pub fn compile_mask_cmd(cfg: &RunConfig, dir: &Path) -> Res<()> {
    write_masks(cfg, &load_checkpoint(cfg)?, dir)
}

pub fn calibrate(cfg: &RunConfig, dir: &Path) -> Res<()> {
    let net = cfg.paths.checkpoint.as_ref().map(|_| load_checkpoint(cfg)).transpose()?;
    let c = &cfg.calibration;
    let mut m = Metrics::default();
    let mut calibrated = Vec::new();
    for (l, geom) in cfg.twin.stages.iter().enumerate() {
        let sys = SystemModel::ideal(geom.clone()).with_gain_variability(c.gain_sigma, seed::derive_path(cfg.seed, &[0xCA, l as u64]));
        let (n, p) = (geom.emitters.count(), geom.detectors.count());
        let plan = ProbePlan { repeats: c.repeats, ..ProbePlan::full(n, p) };
        let mut cal = measure_weight_response(&sys, &plan, seed::derive_path(cfg.seed, &[0xCB, l as u64]), Execution::Parallel)
            .map_err(tag("calibration"))?;
        let usable = exclude_neurons(&mut cal, c.tolerances.gain, c.tolerances.offset * c.tolerances.full_scale)
            .map_err(tag("calibration"))?;
        m.push(format!("stage{l}_usable_neurons"), usable.iter().filter(|&&u| u).count() as f64);
        cal.write_json(dir.join(format!("calibration_{l}.json"))).map_err(tag("calibration"))?;
        if let Some(net) = &net {
            let layer = net.layers.get(l).ok_or_else(|| CliError::Validation(format!("checkpoint has no layer {l}")))?;
            calibrated.push(transfer_weights(&layer.weights, &cal, c.w_max).map_err(tag("calibration"))?);
        }
    }
    if net.is_some() {
        let body = serde_json::to_string(&calibrated).map_err(optonet::Error::from).map_err(tag("calibration"))?;
        std::fs::write(dir.join("calibrated_weights.json"), body)?;
    }
    m.write(dir)
}

fn evaluate_all(cfg: &RunConfig, net: &HardwareNetwork, test: &LabeledDataset, dir: &Path, m: &mut Metrics) -> Res<()> {
    let mut twin = cfg.twin.twin();
    for &fid in &cfg.infer.fidelities {
        if fid == Fidelity::Raytraced && !twin.is_compiled() {
            twin.compile(net, cfg.infer.rays_per_led, seed::derive(cfg.seed, 0x7A), Execution::Parallel)
                .map_err(tag("optics"))?;
        }
        let seeds = if fid == Fidelity::Noisy { cfg.infer.noise_seeds.clone() } else { vec![cfg.seed] };
        for s in seeds {
            let rep = evaluate(net, &twin, test, fid, s, Execution::Parallel).map_err(tag("network"))?;
            let name = match fid {
                Fidelity::Noisy => format!("noisy_seed{s}"),
                Fidelity::Algebraic => "algebraic".into(),
                Fidelity::Raytraced => "raytraced".into(),
            };
            m.push(format!("accuracy_{name}"), rep.accuracy);
            for (k, r) in rep.hidden_correlation.iter().enumerate() {
                m.push(format!("hidden{}_pearson_{name}", k + 1), r.unwrap_or(f64::NAN));
            }
            rep.write_confusion_csv(dir.join(format!("confusion_{name}.csv"))).map_err(tag("network"))?;
        }
    }
    Ok(())
}

pub fn infer(cfg: &RunConfig, dir: &Path) -> Res<()> {
    let net = load_checkpoint(cfg)?;
    let data = load_data(cfg)?;
    let mut m = Metrics::default();
    evaluate_all(cfg, &net, &data.test, dir, &mut m)?;
    m.write(dir)
}

pub fn energy_scan(cfg: &RunConfig, dir: &Path) -> Res<()> {
    let e = &cfg.energy;
    let rows = scaling_sweeps(&e.model).map_err(tag("energy"))?;
    write_sweep_csv(&rows, dir.join("energy_sweep.csv")).map_err(tag("energy"))?;
    let fitted = fit_budget(&published_anchors(), e.model.ops_per_mac).map_err(tag("energy"))?;
    let budget = json!({
        "model": e.model,
        "fitted_to_published_anchors": fitted,
        "emulated": true,
        "note": "component budget fitted to published efficiency figures, not a bill of materials",
    });
    std::fs::write(dir.join("budget.json"), serde_json::to_string_pretty(&budget).expect("json"))?;
    let mut m = Metrics::default();
    if e.diffraction {
        let limit = diffraction_array_limit(&e.array, e.wavelength, cfg.seed, Execution::Parallel).map_err(tag("energy"))?;
        limit.write_csv(dir.join("diffraction.csv")).map_err(tag("energy"))?;
        m.push("diffraction_limit_grid", limit.limit.map_or(f64::NAN, |n| n as f64));
    }
    m.write(dir)
}

/// Dataset, training, linear baseline, inference at every configured
/// fidelity and mask compilation in one run.
pub fn reproduce(cfg: &RunConfig, dir: &Path) -> Res<()> {
    let data = load_data(cfg)?;
    let mut m = Metrics::default();
    let net = train_network(cfg, &data, dir, &mut m)?;
    let linear = linear_baseline(&data.raw_train, &data.raw_test, &cfg.linear).map_err(tag("network"))?;
    m.push("accuracy_linear_baseline", linear);
    let mut infer_metrics = Metrics::default();
    evaluate_all(cfg, &net, &data.test, dir, &mut infer_metrics)?;
    m.0.extend(infer_metrics.0.into_iter().filter(|(n, _)| n != "accuracy_algebraic"));
    write_masks(cfg, &net, dir)?;
    m.write(dir)
}

/// `parent/<command>-<timestamp>`, made unique with a counter.
pub fn create_run_dir(parent: &Path, command: &str) -> Res<PathBuf> {
    std::fs::create_dir_all(parent)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = parent.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    std::fs::create_dir(&dir)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_unique() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), "train").unwrap();
        let b = create_run_dir(tmp.path(), "train").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }

    #[test]
    fn spiral_data_is_encoded_for_the_network() {
        let mut cfg = RunConfig::default();
        cfg.dataset.kind = DatasetKind::Spiral;
        cfg.dataset.spiral.per_class = 50;
        let cfg = cfg.resolved();
        let d = load_data(&cfg).unwrap();
        assert_eq!((d.train.dim(), d.raw_train.dim()), (64, 2));
        assert_eq!(d.train.len() + d.test.len(), 200);
        assert_eq!(d.train.len(), 160);
    }

    #[test]
    fn mnist_without_data_dir_is_a_validation_error() {
        let cfg = RunConfig::default().resolved();
        assert!(matches!(load_data(&cfg), Err(CliError::Validation(_))));
    }
}
