use std::path::Path;
use std::process::{Command, Output};

use ringflow_cli::manifest::{RunManifest, ERROR_MANIFEST_FILE, MANIFEST_FILE};

fn ringflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ringflow")).args(args).output().unwrap()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected a single stderr line, got {text:?}");
    lines[0].to_string()
}

fn path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = ringflow(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error: usage:"));
}

#[test]
fn help_succeeds() {
    let out = ringflow(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("plotdata"));
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[ring]\nn_av = 1\nwidth = 3\n").unwrap();
    let out = ringflow(&["eval", "--config", &path(&cfg), "--episodes", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error: config:"), "{line}");
    assert!(line.contains("line 3"), "{line}");
}

#[test]
fn bad_override_rejected() {
    let out = ringflow(&["eval", "--override", "ring.n_av=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error: config:"));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ringflow(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--out", &path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error: io:"));
}

#[test]
fn architecture_mismatch_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("small.ckpt");
    let mut text = String::from("ringflow-policy v1\nobs=15 hidden=2 act=1\n");
    for _ in 0..(15 * 2 + 2 + 2 + 1 + 1) {
        text.push_str("0\n");
    }
    std::fs::write(&ckpt, text).unwrap();
    let out = ringflow(&["eval", "--checkpoint", &path(&ckpt), "--episodes", "1", "--out", &path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error: architecture:"));
}

#[test]
fn plotdata_errors_are_line_numbered() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "time,vehicle_id,position,speed\n0,1,1.0,2.0\n0.2,1,x,2.0\n").unwrap();
    let out = ringflow(&["plotdata", "--input", &path(&bad), "--out", &path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error: data:") && line.contains("line 3"), "{line}");

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "time,vehicle_id,position,speed\n").unwrap();
    let out = ringflow(&["plotdata", "--input", &path(&empty), "--out", &path(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("no data rows"));
}

#[test]
fn eval_baseline_writes_manifest_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ringflow(&[
        "baseline",
        "ring",
        "--episodes",
        "2",
        "--traces",
        "--override",
        "ring.horizon_steps=100",
        "--out",
        &path(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = RunManifest::load(dir.path()).unwrap();
    assert_eq!(manifest.command, "eval");
    for rel in &manifest.outputs {
        assert!(dir.path().join(rel).is_file(), "{rel}");
    }
    let mut on_disk = Vec::new();
    for entry in walk(dir.path()) {
        let rel = entry.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned();
        if rel != MANIFEST_FILE {
            on_disk.push(rel);
        }
    }
    on_disk.sort();
    let mut listed = manifest.outputs.clone();
    listed.sort();
    assert_eq!(on_disk, listed);
    assert!(!dir.path().join(ERROR_MANIFEST_FILE).exists());
}

#[test]
fn failed_run_leaves_error_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // a trajectory file occupying the traces directory makes the write fail
    std::fs::write(dir.path().join("traces"), "").unwrap();
    let out = ringflow(&[
        "eval",
        "--episodes",
        "1",
        "--traces",
        "--override",
        "ring.horizon_steps=50",
        "--out",
        &path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join(MANIFEST_FILE).exists());
    let text = std::fs::read_to_string(dir.path().join(ERROR_MANIFEST_FILE)).unwrap();
    assert!(text.contains("traces/episode_000.csv"));
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
