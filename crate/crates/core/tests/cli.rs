mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::small_experiment;

fn dpat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DPAT_CACHE_DIR")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, small_experiment(0).to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn print_defaults_lists_values_with_sources() {
    let out = dpat(&["--print-defaults"]);
    assert!(out.status.success());
    let s = text(&out.stdout);
    assert!(s.contains("train.tau"), "{s}");
    assert!(s.lines().count() > 10);
}

#[test]
fn missing_config_exits_with_usage_code() {
    let out = dpat(&["train", "--config", "/no/such/file.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("/no/such/file.toml"));
}

#[test]
fn unknown_config_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\nbogus = 2\n").unwrap();
    let out = dpat(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("bogus"));
}

#[test]
fn train_eval_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let run = |seed: &str, name: &str| {
        let out_dir = tmp.path().join(name);
        let out = dpat(&["train", "--config", &config, "--seed", seed, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        assert!(text(&out.stdout).contains("acc,"));
        out_dir
    };
    let a = run("5", "a");
    let b = run("5", "b");
    let c = run("6", "c");
    for f in ["metrics.csv", "r_matrix.csv", "curve.csv", "learning_curve.svg", "config.toml", "tasks.csv"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    assert!(!a.join("PARTIAL").exists());
    let r = |d: &Path| std::fs::read(d.join("r_matrix.csv")).unwrap();
    assert_eq!(r(&a), r(&b));
    assert_ne!(
        std::fs::read_to_string(a.join("fingerprint.txt")).unwrap(),
        std::fs::read_to_string(c.join("fingerprint.txt")).unwrap()
    );

    let ckpt = a.join("checkpoints").join("task-2");
    let out = dpat(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("task 1 accuracy") && s.contains("matching accuracy") && s.contains("bwf"), "{s}");

    let metric = |name: &str| {
        let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
        csv.lines().find_map(|l| l.strip_prefix(&format!("{name},")).map(str::to_string)).unwrap()
    };
    let printed = |name: &str| s.lines().find_map(|l| l.strip_prefix(&format!("{name} ")).map(str::to_string)).unwrap();
    assert_eq!(printed("acc"), metric("acc"));
    assert_eq!(printed("bwf"), metric("bwf"));

    // curve points are the row means of R
    let r_text = std::fs::read_to_string(a.join("r_matrix.csv")).unwrap();
    let curve_text = std::fs::read_to_string(a.join("curve.csv")).unwrap();
    for (row, line) in r_text.lines().zip(curve_text.lines().skip(1)) {
        let vals: Vec<f64> = row.split(',').filter(|v| !v.is_empty()).map(|v| v.parse().unwrap()).collect();
        let point: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((point - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
    }

    let svg = tmp.path().join("overlay.svg");
    let out = dpat(&["report", a.to_str().unwrap(), c.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let plot = std::fs::read_to_string(&svg).unwrap();
    for d in [&a, &c] {
        let fp = std::fs::read_to_string(d.join("fingerprint.txt")).unwrap();
        assert!(plot.contains(&fp.trim()[..12]), "legend lacks {}", &fp[..12]);
    }

    std::fs::write(ckpt.join("model.safetensors"), b"garbage").unwrap();
    let out = dpat(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn single_task_ablated_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(1);
    cfg.stream.tasks = 1;
    let path = tmp.path().join("one.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out_dir = tmp.path().join("run");
    let out = dpat(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--ablate",
        "temporal-adapter",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let resolved = dpat::config::ExperimentConfig::load(&out_dir.join("config.toml")).unwrap();
    assert!(resolved.train.ablation.temporal_adapter);
    assert!(!resolved.train.ablation.all_adapters);
    assert!(std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap().contains("bwf,undefined"));

    let ckpt = out_dir.join("checkpoints").join("task-1");
    let out = dpat(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("matching accuracy 1\n"), "{}", text(&out.stdout));

    let out = dpat(&["report", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let svg = std::fs::read_to_string(out_dir.join("learning_curve.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
}
