//! End-to-end tests of the `thzlab` binary: exit codes, machine-readable
//! errors, artifact layout, and determinism of generating commands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_thzlab"))
}

fn toy_config(dir: &Path) -> Value {
    json!({
        "seed": 7,
        "out_dir": dir.join("out"),
        "phantom": {
            "families": [
                { "name": "a", "kind": "procedural", "count": 1 },
                { "name": "b", "kind": "procedural", "count": 1 },
                { "name": "c", "kind": "procedural", "count": 1 },
                { "name": "d", "kind": "procedural", "count": 1 }
            ],
            "size": 16,
            "material_n": 1.54,
            "material_alpha": 0.25
        },
        "degrade": { "psf_k": 0.3, "snr_db": null, "trace_len": 1024 },
        "simulate": { "angles": 2, "step_deg": 60.0 },
        "model": {
            "variant": "sarnet",
            "scales": 2,
            "base_channels": 4,
            "k": 4,
            "c1": 4,
            "bands_per_scale": 2,
            "num_bands": 12,
            "input_size": 16,
            "cam_ratio": 4,
            "eps_reg": 1e-6,
            "l_spectral": 1,
            "l_feature": 3
        },
        "training": { "epochs": 1, "batch_size": 4, "lr_initial": 1e-3 },
        "tomo": { "method": "fbp" }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn full_pipeline_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &toy_config(tmp.path()));
    let cfg = cfg_path.to_str().unwrap();
    let out_dir = tmp.path().join("out");

    run_ok(&["phantom", "--config", cfg]);
    assert_eq!(fs::read_dir(out_dir.join("phantoms")).unwrap().count(), 4);

    run_ok(&["simulate", "--config", cfg]);
    // 4 phantoms x 2 angles x (original + flipped)
    assert_eq!(fs::read_dir(out_dir.join("views")).unwrap().count(), 16);

    run_ok(&["dataset", "--config", cfg]);
    for m in ["train", "val", "test"] {
        assert!(out_dir.join("dataset").join(format!("{m}.json")).exists());
    }

    let out = run_ok(&["train", "--config", cfg]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["epochs"], json!(1));
    assert!(out_dir.join("checkpoint/model.json").exists());
    assert!(out_dir.join("log.jsonl").exists());
    // log lines parse as epoch records
    let log = fs::read_to_string(out_dir.join("log.jsonl")).unwrap();
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].is_number() && rec["lr"].is_number());
    }

    run_ok(&["restore", "--config", cfg]);
    let restored = fs::read_dir(out_dir.join("restored")).unwrap().count();
    assert_eq!(restored, 8); // 4 test views, each .tzt1 + .pgm

    let out = run_ok(&["reconstruct", "--config", cfg, "--phantom", "d-000"]);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rep["volume"].as_str().unwrap().ends_with("d-000_volume.tzt1"));

    let out = run_ok(&["eval", "--config", cfg]);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["views"].as_array().unwrap().len(), 4);
    assert!(out_dir.join("metrics.json").exists());
}

#[test]
fn simulate_flip_doubles_view_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(tmp.path());
    // a single small phantom keeps 30 angles fast
    cfg["phantom"]["families"] = json!([{ "name": "a", "kind": "disk", "count": 1 }]);
    let cfg_path = write_config(tmp.path(), &cfg);
    let c = cfg_path.to_str().unwrap();
    run_ok(&["phantom", "--config", c]);
    let out = run_ok(&["simulate", "--config", c, "--angles", "30", "--step", "6"]);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["views"], json!(60));
}

#[test]
fn generating_commands_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(tmp.path());
    cfg["phantom"]["families"] = json!([{ "name": "a", "kind": "procedural", "count": 1 }]);
    cfg["degrade"]["snr_db"] = json!(20.0);
    let cfg_path = write_config(tmp.path(), &cfg);
    let c = cfg_path.to_str().unwrap();
    run_ok(&["phantom", "--config", c]);
    run_ok(&["simulate", "--config", c]);
    let views = tmp.path().join("out/views");
    let snapshot: Vec<(String, Vec<u8>)> = {
        let mut v: Vec<_> = fs::read_dir(&views)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        v.sort();
        v.iter()
            .map(|p| (p.display().to_string(), fs::read(p).unwrap()))
            .collect()
    };
    run_ok(&["phantom", "--config", c]);
    run_ok(&["simulate", "--config", c]);
    for (path, bytes) in snapshot {
        assert_eq!(fs::read(&path).unwrap(), bytes, "{path} changed on rerun");
    }
}

#[test]
fn config_errors_exit_2_with_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(tmp.path());
    cfg["unexpected"] = json!(1);
    let cfg_path = write_config(tmp.path(), &cfg);
    let out = bin()
        .args(["phantom", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], json!("config"));
    assert!(err["error"]["message"].is_string());
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &toy_config(tmp.path()));
    // simulate before phantom: no phantom files
    let out = bin()
        .args(["simulate", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].is_string());
    // nonexistent config file: I/O error, exit 4
    let out = bin()
        .args(["eval", "--config", "/nonexistent/run.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gradcheck_reports_pass() {
    let out = run_ok(&["gradcheck", "--seed", "3"]);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["pass"], json!(true));
}
