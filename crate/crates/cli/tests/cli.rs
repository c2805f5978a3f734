use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ssm-surgeon"));
    c.env("SSM_SURGEON_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn fixture(dir: &Path) -> PathBuf {
    let ck = dir.join("ck");
    let out = run(&["fixture", "--kind", "random", "--seed", "3", "--out", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ck
}

fn prune_args<'a>(ck: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["prune", "--checkpoint", ck, "--nsamples", "4", "--seqlen", "16"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn exit_codes_follow_failing_stage() {
    let dir = TempDir::new().unwrap();
    let ck = fixture(dir.path());
    let ck = ck.to_str().unwrap();

    let bad_sparsity = run(&prune_args(ck, &["--sparsity", "1.5"]));
    assert_eq!(bad_sparsity.status.code(), Some(2));

    let missing = dir.path().join("missing");
    let no_ckpt = run(&prune_args(missing.to_str().unwrap(), &[]));
    assert_eq!(no_ckpt.status.code(), Some(3));

    let missing_calib = dir.path().join("none.txt");
    let no_calib = run(&prune_args(ck, &["--calib", missing_calib.to_str().unwrap()]));
    assert_eq!(no_calib.status.code(), Some(4));

    let bad_threads = bin().args(prune_args(ck, &[])).env("SSM_SURGEON_THREADS", "zero").output().unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));

    // unparseable flag values are rejected by the argument parser itself
    let bad_pattern = run(&prune_args(ck, &["--pattern", "3:2"]));
    assert!(!bad_pattern.status.success());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let ck = fixture(dir.path());
    let ck = ck.to_str().unwrap();
    let out = dir.path().join("out");
    let report = dir.path().join("report.json");
    let args = prune_args(
        ck,
        &["--target", "all", "--out", out.to_str().unwrap(), "--report", report.to_str().unwrap()],
    );

    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let o = run(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        snapshots.push((
            std::fs::read(out.join("model.bin")).unwrap(),
            std::fs::read(out.join("manifest.json")).unwrap(),
            std::fs::read(&report).unwrap(),
        ));
    }
    assert!(snapshots[0] == snapshots[1]);
}

#[test]
fn zero_sparsity_rewrites_input_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ck = fixture(dir.path());
    let out = dir.path().join("out");
    let o = run(&prune_args(
        ck.to_str().unwrap(),
        &["--target", "all", "--sparsity", "0", "--out", out.to_str().unwrap()],
    ));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(ck.join("model.bin")).unwrap(), std::fs::read(out.join("model.bin")).unwrap());
}

#[test]
fn file_calibration_and_column_pattern() {
    let dir = TempDir::new().unwrap();
    let ck = fixture(dir.path());
    let calib = dir.path().join("calib.txt");
    let lines: Vec<String> = (0..8)
        .map(|i| (0..16).map(|j| ((i * 7 + j * 3) % 32).to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    std::fs::write(&calib, lines.join("\n")).unwrap();
    let report = dir.path().join("r.json");
    let o = run(&prune_args(
        ck.to_str().unwrap(),
        &[
            "--calib",
            calib.to_str().unwrap(),
            "--pattern",
            "column",
            "--report",
            report.to_str().unwrap(),
        ],
    ));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json["d_state_out"].as_u64().unwrap() < 8);
}
