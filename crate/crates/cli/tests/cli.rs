use std::path::Path;
use std::process::{Command, Output};

fn anisoprod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anisoprod"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("anisoprod-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn dilation_reports_determinant_and_sigma() {
    let out = anisoprod(&["dilation", "--matrix", "2", "--dim", "1"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["b"].as_f64(), Some(2.0));
    assert_eq!(v["sigma"].as_i64(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = anisoprod(&["dilation", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = anisoprod(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_errors_exit_with_one_and_name() {
    let out = anisoprod(&["dilation", "--matrix", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("NotExpansive"));
}

#[test]
fn kernel_check_prints_condition_report() {
    let out = anisoprod(&[
        "kernel-check",
        "--kernel",
        "tensorcz:profile=sign",
        "--cond",
        "K1",
        "--orders",
        "0,0",
    ]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["condition"], "K1");
    assert!((v["worst"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn decay_experiment_is_deterministic_and_writes_manifest() {
    let dir = scratch("t12");
    let cfg = write_config(
        &dir,
        "experiment = t12\n[grid]\npoints = 8192\nhalf_width = 1024\n[decay]\ngamma_max = 3\n",
    );
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.join(run);
        let out = anisoprod(&[
            "experiment",
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out",
            out_dir.to_str().unwrap(),
            "--tsv",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(json(&out)["fitted_slope"].as_f64().unwrap() < 0.0);
        assert!(out_dir.join("t12.tsv").exists());
        assert!(out_dir.join("t12_summary.json").exists());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["config"]["seed"], 3);
        assert_eq!(manifest["config"]["points"], 8192);
        assert_eq!(manifest["status"], "ok");
        tables.push(std::fs::read_to_string(out_dir.join("t12.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn kernel_without_cancellation_aborts_and_is_recorded() {
    let dir = scratch("t11");
    let cfg = write_config(&dir, "experiment = t11\nkernel = tensorcz:profile=constant\npoints = 64\nhalf_width = 16\ncount = 1\n");
    let out_dir = dir.join("out");
    let out = anisoprod(&[
        "experiment",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("PVNotConvergent"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["status"], "aborted");
    assert_eq!(manifest["error"]["name"], "PVNotConvergent");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = scratch("badkey");
    let cfg = write_config(&dir, "experiment = norm\ncolour = blue\n");
    let out = anisoprod(&["experiment", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("Config"));
}
