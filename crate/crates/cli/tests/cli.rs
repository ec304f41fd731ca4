use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superatom"))
        .args(args)
        .current_dir(dir)
        .env("SUPERATOM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: Value) -> String {
    fs::write(dir.join(name), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    name.to_string()
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr carries error JSON")
}

fn csv_column(path: &Path, col: usize) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn simulate_writes_traces_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.json",
        json!({
            "seed": 5,
            "model": {"kind": "four_level", "table_row": 1},
            "simulate": {
                "pulse_lengths": [0.5, 1.0, 2.0, 3.0],
                "timing": {"post_window": 2.0},
                "noise": {"n_measurements": 100000, "efficiency": 0.35}
            }
        }),
    );
    for out in ["a", "b"] {
        let o = run(dir.path(), &["simulate", "--config", &cfg, "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for k in 0..4 {
        let name = format!("trace_{k:02}.csv");
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(&name)).unwrap());
        let meta: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("a").join(format!("trace_{k:02}.json"))).unwrap())
                .unwrap();
        assert_eq!(meta["seed"], 5);
        assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
        assert!(meta["pulse"]["duration"].is_number());
    }

    let o = run(dir.path(), &["simulate", "--config", &cfg, "--out", "c", "--seed", "6"]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(dir.path().join("a/trace_03.csv")).unwrap(),
        fs::read(dir.path().join("c/trace_03.csv")).unwrap()
    );
}

#[test]
fn zero_amplitude_pulse_gives_zero_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "zero.json",
        json!({
            "model": {"kind": "four_level", "table_row": 2},
            "simulate": {"pulse_lengths": [1.0], "timing": {"peak_rate": 0.0, "post_window": 1.0}}
        }),
    );
    let o = run(dir.path(), &["simulate", "--config", &cfg, "--out", "z"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rates = csv_column(&dir.path().join("z/trace_00.csv"), 1);
    assert!(!rates.is_empty());
    assert!(rates.iter().all(|&r| r == 0.0));
}

#[test]
fn incoherent_sweep_has_constant_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        json!({
            "model": {"kind": "four_level", "table_row": 1, "incoherent": true},
            "sweep": {"pulse_lengths": {"start": 0.3, "stop": 3.0, "count": 10}, "options": {"post_window": 3.0}}
        }),
    );
    let o = run(dir.path(), &["sweep", "--config", &cfg, "--out", "s"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gamma = csv_column(&dir.path().join("s/sweep.csv"), 1);
    assert_eq!(gamma.len(), 10);
    for g in gamma {
        assert!((g - 1.46).abs() < 1e-4, "{g}");
    }
    assert_eq!(fs::read(dir.path().join("s/sweep.csv")).unwrap(), o.stdout);

    let o = run(dir.path(), &["sweep", "--config", &cfg, "--format", "json"]);
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["metadata"]["command"], "sweep");
    assert_eq!(doc["summary"]["n_failed"], 0);
    assert!((doc["summary"]["rabi_period"].as_f64().unwrap() - 1.196).abs() < 1e-3);
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_config(
        dir.path(),
        "empty.json",
        json!({"model": {"kind": "four_level", "table_row": 1}, "sweep": {"pulse_lengths": []}}),
    );
    let o = run(dir.path(), &["sweep", "--config", &empty]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "usage");

    let unknown = write_config(dir.path(), "unknown.json", json!({"model": {"kind": "four_level", "table_rwo": 1}}));
    let o = run(dir.path(), &["validate-config", "--config", &unknown]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("table_rwo"));

    let o = run(dir.path(), &["sweep"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "usage");

    let bad_row = write_config(
        dir.path(),
        "row.json",
        json!({"model": {"kind": "four_level", "table_row": 9}, "sweep": {"pulse_lengths": [1.0]}}),
    );
    let o = run(dir.path(), &["validate-config", "--config", &bad_row]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_trace_file_is_reported_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cal.json",
        json!({"calibrate": {"datasets": [{"name": "x", "delta_mhz": 100, "traces": ["data/absent.csv"]}]}}),
    );
    let o = run(dir.path(), &["calibrate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = error_json(&o);
    assert_eq!(err["error"]["kind"], "file_not_found");
    assert!(err["error"]["message"].as_str().unwrap().contains("absent.csv"));

    let o = run(dir.path(), &["validate-config", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn calibrate_recovers_simulated_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let sim = write_config(
        dir.path(),
        "sim.json",
        json!({
            "seed": 2,
            "model": {"kind": "four_level", "table_row": 1},
            "simulate": {
                "pulse_lengths": [0.5, 1.5, 3.0],
                "timing": {"post_window": 3.0},
                "noise": {"n_measurements": 1000000, "efficiency": 0.35}
            }
        }),
    );
    assert!(run(dir.path(), &["simulate", "--config", &sim, "--out", "traces"]).status.success());
    let cal = write_config(
        dir.path(),
        "cal.json",
        json!({
            "calibrate": {
                "datasets": [{
                    "name": "row1", "delta_mhz": 100, "gamma_raman": 0.15,
                    "traces": ["traces/trace_00.csv", "traces/trace_01.csv", "traces/trace_02.csv"]
                }],
                "options": {"n_starts": 2}
            }
        }),
    );
    let o = run(dir.path(), &["calibrate", "--config", &cal, "--out", "fit", "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    let row = &doc["report"]["datasets"][0];
    let rel = |key: &str, truth: f64| (row[key].as_f64().unwrap() - truth).abs() / truth;
    assert!(rel("kappa", 0.46) < 0.05, "{row}");
    assert!(rel("varkappa", 0.31) < 0.15, "{row}");
    assert!(rel("gamma_d", 0.85) < 0.10, "{row}");
    assert!(dir.path().join("fit/calibration.csv").exists());
    assert_eq!(doc["metadata"]["command"], "calibrate");
}

#[test]
fn waveguide_traces_yield_scaling_section() {
    let dir = tempfile::tempdir().unwrap();
    let mut datasets = Vec::new();
    for (i, kappa) in [0.25, 0.45, 0.7].into_iter().enumerate() {
        let sim = write_config(
            dir.path(),
            &format!("wg{i}.json"),
            json!({
                "model": {"kind": "waveguide", "n_atoms": 20, "kappa": kappa, "gamma_raman": 0.1, "backend": "density"},
                "simulate": {"pulse_lengths": [0.5, 1.5], "timing": {"post_window": 3.0}}
            }),
        );
        let out = format!("wg{i}");
        let o = run(dir.path(), &["simulate", "--config", &sim, "--out", &out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        datasets.push(json!({
            "name": format!("k{i}"), "delta_mhz": 100, "gamma_raman": 0.1,
            "traces": [format!("{out}/trace_00.csv"), format!("{out}/trace_01.csv")]
        }));
    }
    let cal = write_config(
        dir.path(),
        "cal.json",
        json!({
            "calibrate": {
                "datasets": datasets,
                "free": {"gamma_d": false},
                "fixed": {"gamma_d": 0.0},
                "options": {"n_starts": 1},
                "kappa_scaling": true
            }
        }),
    );
    let o = run(dir.path(), &["calibrate", "--config", &cal, "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    let scaling = &doc["report"]["kappa_scaling"];
    assert_eq!(scaling["n_points"], 3);
    assert!(scaling["slope"].as_f64().unwrap() > 0.0, "{scaling}");
}
