use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cvs_core::harness::RunConfig;
use cvs_core::mapeval::Roi;

fn cvs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvs")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        "[data]\nn_train = 4\nn_val = 2\n[train]\nsteps = 2\nbatch_size = 2\n[teacher_train]\nsteps = 2\nbatch_size = 2\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn config_dump_round_trips() {
    let out = cvs(&["config", "--seed", "7", "--roi", "standard"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = RunConfig::from_toml(&text, Path::new("stdout")).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.roi, Roi::Standard);
    assert_eq!(cfg.to_toml(), text);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[supervision]\nlambda_bev = -2.0\n").unwrap();
    assert_eq!(cvs(&["--config", bad.to_str().unwrap(), "config"]).status.code(), Some(1));
    assert_eq!(cvs(&["train", "--variant", "bogus"]).status.code(), Some(1));
    assert_eq!(cvs(&["--config", "/nonexistent/x.toml", "gen"]).status.code(), Some(1));
}

#[test]
fn repeated_gen_gives_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let read = |root: &Path| {
        let data = fs::read_dir(root.join("data")).unwrap().next().unwrap().unwrap().path();
        (fs::read(data.join("manifest.txt")).unwrap(), fs::read(data.join("dataset.txt")).unwrap())
    };
    let mut seen = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let out = cvs(&["--out", root.to_str().unwrap(), "gen", "--scenes", "8"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        seen.push(read(&root));
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(String::from_utf8_lossy(&seen[0].0).lines().count(), 8);
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("out");
    let out = cvs(&["--config", &cfg, "--out", root.to_str().unwrap(), "train", "--variant", "baseline"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = root.join("runs/extended/baseline_lam1_seed0");
    for f in ["config.toml", "steps.log", "record.txt", "eval_extended.txt", "similarity_baseline.txt", "viz_student.pgm"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let record = fs::read_to_string(run.join("record.txt")).unwrap();
    assert!(record.contains("teacher_invocations 0\n"));
    assert_eq!(fs::read_to_string(run.join("steps.log")).unwrap().lines().count(), 3);
}

#[test]
fn diverging_sweep_point_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("out");
    let out = cvs(&[
        "--config",
        &cfg,
        "--out",
        root.to_str().unwrap(),
        "sweep-lambda",
        "--seeds",
        "1",
        "--values",
        "0,1,1e308",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(root.join("tables/sweep_extended.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn sweep_without_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cvs(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "sweep-lambda", "--values", "1,2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_regenerates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("out");
    let r = root.to_str().unwrap();
    assert!(cvs(&["--config", &cfg, "--out", r, "train", "--variant", "baseline"]).status.success());
    assert!(cvs(&["--config", &cfg, "--out", r, "train", "--variant", "norm_adapter"]).status.success());
    assert!(cvs(&["--out", r, "report"]).status.success());
    let first = fs::read(root.join("report.md")).unwrap();
    assert!(cvs(&["--out", r, "report"]).status.success());
    assert_eq!(fs::read(root.join("report.md")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("| Δ |") && text.contains("## Sources"));
}
