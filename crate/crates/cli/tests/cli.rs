use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn spikefed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikefed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run_smoke(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", "smoke", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    spikefed(&args)
}

#[test]
fn smoke_run_writes_every_artifact_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let start = Instant::now();
    let out = run_smoke(&dir, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(start.elapsed() < Duration::from_secs(60));
    for name in spikefed::experiment::ARTIFACTS {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    for regime in ["pfl-snn", "pfl-ann", "fl-snn", "fl-ann"] {
        assert!(dir.join(format!("models/{regime}-global.json")).is_file());
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pfl-snn"));

    let model = dir.join("models/pfl-snn-client0.json");
    let out = spikefed(&["energy", "--config", "smoke", "--model", model.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rates"].as_array().unwrap().len(), 2);
    let ann = dir.join("models/fl-ann-global.json");
    let out = spikefed(&["energy", "--config", "smoke", "--model", ann.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_smoke(&a, &["--seed", "11"]).status.success());
    assert!(run_smoke(&b, &["--seed", "11"]).status.success());
    for name in ["accuracy.csv", "drift.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn regime_filter_limits_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = run_smoke(&dir, &["--regimes", "fl-ann", "--rounds", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("accuracy.csv")).unwrap();
    let regimes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(regimes, ["fl-ann"]);
    assert!(!dir.join("models/pfl-snn-global.json").exists());
}

#[test]
fn validate_prints_resolved_config() {
    let out = spikefed(&["validate", "--config", "smoke", "--rounds", "7"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("valid\n"));
    let cfg = spikefed::ExperimentConfig::from_toml(stdout.trim_start_matches("valid\n")).unwrap();
    assert_eq!(cfg.train.rounds, 7);
}

#[test]
fn invalid_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[lif]\nleak = 1.5\n").unwrap();
    let out = spikefed(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lif.leak"));

    fs::write(&bad, "seed = 1\nbogus = 3\n").unwrap();
    let out = spikefed(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let out = spikefed(&["validate", "--config", "smoke", "--regimes", "fl-cnn"]);
    assert_eq!(out.status.code(), Some(2));

    let out = spikefed(&["validate", "--config", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn energy_from_rates_matches_library() {
    let out = spikefed(&["energy", "--config", "smoke", "--rates", "0.1,0.2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ratio = report["ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio.is_finite());

    let out = spikefed(&["energy", "--config", "smoke", "--rates", "0.1,1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let out = spikefed(&["energy", "--config", "smoke"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_roundtrips_through_file_source() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("smoke.sfd");
    let out = spikefed(&["gen-data", "--config", "smoke", "--file", file.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let container = spikefed::data::read_container(&file).unwrap();
    assert_eq!((container.channels, container.length, container.num_classes), (4, 32, 4));
}
