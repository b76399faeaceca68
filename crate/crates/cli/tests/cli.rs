use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn optonet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optonet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OPTONET_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(&out.stdout).trim())
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn unknown_command_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = optonet(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn misspelled_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[twin.circuit]\ngian = 2.0\n");
    let out = optonet(&["--config", cfg.to_str().unwrap(), "energy-scan"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gian") && err.contains("\"kind\":\"validation\""), "{err}");
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn infer_without_checkpoint_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = optonet(&["--dataset", "spiral", "infer"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let dir = std::fs::read_dir(tmp.path().join("runs")).unwrap().next().unwrap().unwrap().path();
    assert!(dir.join("INCOMPLETE").exists() && dir.join("error.json").exists());
}

#[test]
fn energy_scan_reproduces_the_prototype_efficiency() {
    let tmp = tempfile::tempdir().unwrap();
    let out = optonet(&["energy-scan", "--output-dir", "out"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rel = run_dir(&out);
    assert!(rel.starts_with("out"));
    let dir = tmp.path().join(rel);
    assert!(dir.join("config.toml").exists() && !dir.join("INCOMPLETE").exists());
    let csv = std::fs::read_to_string(dir.join("energy_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let row: Vec<&str> = lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|r| r[col("sweep")] == "grid" && r[col("grid_size")] == "8" && r[col("clock_hz")] == "500000")
        .unwrap();
    let opw: f64 = row[col("ops_per_watt")].parse().unwrap();
    assert!((opw / 11.61e9 - 1.0).abs() <= 0.05, "{opw}");
}

#[test]
fn spiral_pipeline_is_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "small.toml",
        "seed = 4\nthreads = 1\n[dataset.spiral]\nper_class = 100\n[train]\nepochs = 4\n[infer]\nnoise_seeds = [7]\n",
    );
    let first = optonet(&["--config", cfg.to_str().unwrap(), "reproduce", "spiral"], tmp.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let a = tmp.path().join(run_dir(&first));
    for f in ["checkpoint.json", "loss.csv", "metrics.csv", "confusion_algebraic.csv", "confusion_noisy_seed7.csv", "mask_0.pgm", "mask_2.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("name,value\n") && metrics.contains("accuracy_linear_baseline"));

    // Replaying the effective config reproduces the run bit for bit.
    let snapshot = a.join("config.toml");
    let second = optonet(&["--config", snapshot.to_str().unwrap(), "reproduce", "spiral"], tmp.path());
    assert!(second.status.success());
    let b = tmp.path().join(run_dir(&second));
    for f in ["checkpoint.json", "metrics.csv", "config.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let ckpt = a.join("checkpoint.json");
    let infer = optonet(&["--config", snapshot.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "infer"], tmp.path());
    assert!(infer.status.success(), "{}", String::from_utf8_lossy(&infer.stderr));
    let cal = optonet(&["--checkpoint", ckpt.to_str().unwrap(), "--dataset", "spiral", "calibrate"], tmp.path());
    assert!(cal.status.success(), "{}", String::from_utf8_lossy(&cal.stderr));
    let c = tmp.path().join(run_dir(&cal));
    assert!(c.join("calibration_0.json").exists() && c.join("calibrated_weights.json").exists());
}

#[test]
fn reproduce_mnist_meets_the_accuracy_targets() {
    let data = std::env::var_os("OPTONET_DATA_DIR").map_or_else(|| PathBuf::from("/root/data/mnist"), PathBuf::from);
    if !data.join("train-images-idx3-ubyte").exists() {
        eprintln!("skipping: no MNIST files in {}", data.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let out = optonet(&["--data-dir", data.to_str().unwrap(), "reproduce", "mnist"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(tmp.path().join(run_dir(&out)).join("metrics.csv")).unwrap();
    let value = |name: &str| -> f64 {
        metrics.lines().find_map(|l| l.strip_prefix(&format!("{name},"))).unwrap().parse().unwrap()
    };
    assert!(value("accuracy_algebraic") >= 0.94);
    for s in 0..3 {
        assert!(value(&format!("accuracy_noisy_seed{s}")) >= 0.90);
    }
}
