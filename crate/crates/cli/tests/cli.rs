use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn engine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_engine")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        "seed = 2\n[synthetic]\nsequences = 40\n[base]\nkind = \"hawkes\"\n[base.train]\nepochs = 1\n\
         [propose]\ntime_queries = 5\nmbr_samples = 3\n[ranker.train]\nepochs = 1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn all_runs_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let res = engine(&["all", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for stage in ["train-base", "abduce", "evaluate", "report"] {
        assert!(stdout.contains(&format!("{stage}: done")), "{stdout}");
    }
    assert!(out.join("report/metrics.csv").exists());
}

#[test]
fn unknown_stage_is_rejected() {
    let res = engine(&["bake", "--config", "x.toml"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("train-base"));
}

#[test]
fn missing_config_exits_with_two() {
    let res = engine(&["all", "--config", "/nonexistent/run.toml"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn out_of_order_stage_reports_which_stage_failed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let res = engine(&["retrieve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("error in stage retrieve"), "{stderr}");
}
