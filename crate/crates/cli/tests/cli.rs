use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fthd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fthd"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fthd(dir, args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

/// A quick variant of `base` with tiny training budgets.
fn quick_config(dir: &Path, base: &str) -> PathBuf {
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(preset(base)).unwrap()).unwrap();
    cfg["network"] = serde_json::json!({ "hidden_layers": 2, "hidden_size": 6, "gru_layers": 0, "history": 2 });
    cfg["pretrain"]["iterations"] = 60.into();
    cfg["pretrain"]["validate_every"] = 20.into();
    cfg["finetune"]["iterations"] = 30.into();
    cfg["finetune"]["validate_every"] = 10.into();
    cfg["search"] = serde_json::json!({
        "hidden_layers": [1, 2], "gru_layers": [0, 0], "hidden_size": [4, 8],
        "learning_rate": [1e-3, 5e-3], "history": [1, 2], "batch_size": [32]
    });
    if cfg.get("ekf").is_some() {
        cfg["ekf"]["pretrain_iterations"] = 40.into();
        cfg["ekf"]["finetune_iterations"] = 20.into();
        cfg["ekf"]["adjust_iterations"] = 20.into();
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn simulate_writes_default_dataset_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = ok(a.path(), &["simulate", "--seed", "5"]);
    assert!(out.contains("seed: 5"));
    assert!(out.contains("config: {"));
    ok(b.path(), &["simulate", "--seed", "5"]);

    let rows = csv_rows(&a.path().join("data.csv"));
    assert_eq!(rows.len(), 1001);
    let t: Vec<f64> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(t.windows(2).all(|w| (w[1] - w[0] - 0.02).abs() < 1e-9));
    assert_eq!(fs::read(a.path().join("data.csv")).unwrap(), fs::read(b.path().join("data.csv")).unwrap());
    assert!(a.path().join("ground_truth.json").exists());
    assert!(!a.path().join("data_noisy.csv").exists());
}

#[test]
fn noise_flag_writes_clean_and_noisy_copies() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--noise"]);
    let clean = csv_rows(&dir.path().join("data.csv"));
    let noisy = csv_rows(&dir.path().join("data_noisy.csv"));
    assert_eq!(clean.len(), noisy.len());
    assert_eq!(clean[0], noisy[0]);
    assert_ne!(clean[10][1], noisy[10][1]);
    assert_eq!(clean[10][0], noisy[10][0]);
}

#[test]
fn missing_prerequisites_name_the_expected_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = fthd(dir.path(), &["pretrain"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact"), "{err}");
    assert!(err.contains("data.csv"), "{err}");

    ok(dir.path(), &["simulate"]);
    let out = fthd(dir.path(), &["finetune"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success());
    assert!(err.contains("missing artifact"), "{err}");
    assert!(err.contains(&format!("pretrain{}checkpoint.json", std::path::MAIN_SEPARATOR)), "{err}");

    let out = fthd(dir.path(), &["evaluate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"));
}

#[test]
fn full_pipeline_produces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "sim.json");
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", cfg, "simulate"]);
    ok(dir.path(), &["--config", cfg, "pretrain", "--ratio", "0.5"]);
    ok(dir.path(), &["--config", cfg, "finetune", "--ratio", "0.5"]);
    ok(dir.path(), &["--config", cfg, "evaluate", "--ratio", "0.5"]);
    ok(dir.path(), &["--config", cfg, "sweep-forces"]);

    for f in ["pretrain/checkpoint.json", "pretrain/report.json", "pretrain/loss_curve.csv", "finetune/checkpoint.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["ratio"], 0.5);
    for c in 0..3 {
        let (rmse, max) = (metrics["rmse"][c].as_f64().unwrap(), metrics["max_error"][c].as_f64().unwrap());
        assert!(rmse >= 0.0 && rmse <= max);
    }
    assert!(metrics["l_min"].as_f64().unwrap() > 0.0);

    let curve = csv_rows(&dir.path().join("eval/force_curve.csv"));
    assert_eq!(curve[0], ["alpha", "f_fy", "f_ry", "f_fy_gt", "f_ry_gt"]);
    assert_eq!(curve.len(), 122);
    let diff = csv_rows(&dir.path().join("eval/coeff_diff.csv"));
    assert_eq!(diff.len(), 18);
    assert_eq!(fs::read(dir.path().join("eval/force_curve.csv")).unwrap(), fs::read(dir.path().join("forces/force_curve.csv")).unwrap());

    // Same config and seed: byte-identical checkpoint.
    let first = fs::read(dir.path().join("finetune/checkpoint.json")).unwrap();
    ok(dir.path(), &["--config", cfg, "finetune", "--ratio", "0.5"]);
    assert_eq!(first, fs::read(dir.path().join("finetune/checkpoint.json")).unwrap());
}

#[test]
fn tune_is_deterministic_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let cfg = quick_config(dir, "sim.json");
        let cfg = cfg.to_str().unwrap();
        ok(dir, &["--config", cfg, "simulate"]);
        ok(dir, &["--config", cfg, "tune", "--trials", "4", "--seed", "3"]);
    }
    let best = fs::read_to_string(a.path().join("tune/best.json")).unwrap();
    assert_eq!(best, fs::read_to_string(b.path().join("tune/best.json")).unwrap());
    let trials: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("tune/trials.json")).unwrap()).unwrap();
    assert_eq!(trials.as_array().unwrap().len(), 4);
}

#[test]
fn denoise_then_train_on_filtered_data_with_adjusted_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), "noisy.json");
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", cfg, "simulate", "--noise"]);

    // The preset trains on the filtered set, which does not exist yet.
    let out = fthd(dir.path(), &["--config", cfg, "pretrain"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data_ekf.csv"));

    ok(dir.path(), &["--config", cfg, "denoise"]);
    for f in ["data_ekf.csv", "noise.csv", "bounds_adjusted.json", "range_adjustment.json", "ekf/checkpoint.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let filtered = csv_rows(&dir.path().join("data_ekf.csv"));
    let noisy = csv_rows(&dir.path().join("data_noisy.csv"));
    assert_eq!(filtered.len(), noisy.len());
    assert_eq!(filtered[0], noisy[0]);
    // Timestamps and controls untouched.
    for (f, n) in filtered.iter().zip(&noisy).skip(1) {
        assert_eq!(f[0], n[0]);
        assert_eq!(f[4..], n[4..]);
    }
    assert_eq!(csv_rows(&dir.path().join("noise.csv"))[0], ["time", "n_vx", "n_vy", "n_omega"]);

    ok(dir.path(), &["--config", cfg, "pretrain"]);
    ok(dir.path(), &["--config", cfg, "finetune"]);
    ok(dir.path(), &["--config", cfg, "evaluate"]);
    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("finetune/checkpoint.json")).unwrap()).unwrap();
    let adjusted: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bounds_adjusted.json")).unwrap()).unwrap();
    assert_eq!(ckpt["bounds"]["lower"][0], adjusted["lower"]["front"]["b"]);
}

#[test]
fn presets_parse_and_invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["sim.json", "noisy.json"] {
        let p = preset(name);
        let out = fthd(dir.path(), &["--config", p.to_str().unwrap(), "--ratio", "2", "simulate"]);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
    }
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "seeed": 3 }"#).unwrap();
    let out = fthd(dir.path(), &["--config", bad.to_str().unwrap(), "simulate"]);
    assert!(!out.status.success());
}
