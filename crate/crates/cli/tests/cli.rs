//! Runs the `proxvi` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn proxvi(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxvi"))
        .args(args)
        .env("PROXVI_CACHE", cache)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = proxvi(&["check"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn fetch_data_fills_cache() {
    let dir = tempfile::tempdir().unwrap();
    let o = proxvi(&["fetch-data", "--dataset", "ionosphere"], dir.path());
    assert!(o.status.success());
    let path = stdout(&o);
    assert!(path.trim().starts_with(dir.path().to_str().unwrap()));
    assert_eq!(fs::read_to_string(path.trim()).unwrap().lines().count(), 351);
}

#[test]
fn fit_exit_status_reflects_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pg");
    let o = proxvi(
        &["fit", "--method", "pg", "--beta", "1", "--passes", "60", "--no-test-logloss", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for f in ["trace.csv", "summary.csv", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let o = proxvi(&["fit", "--method", "pg", "--beta", "1", "--passes", "2", "--no-test-logloss"], dir.path());
    assert_eq!(o.status.code(), Some(4));

    let o = proxvi(&["fit", "--method", "sgd", "--passes", "3", "--no-test-logloss"], dir.path());
    assert_eq!(o.status.code(), Some(3));

    let o = proxvi(&["fit", "--method", "newton"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_snapshot_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = ["fit", "--method", "pg-svi", "--passes", "2", "--samples", "20", "--seed", "5", "--no-test-logloss"];
    let mut a: Vec<&str> = args.to_vec();
    a.extend(["--out", first.to_str().unwrap()]);
    proxvi(&a, dir.path());

    let second = dir.path().join("second");
    let snap = fs::read_to_string(first.join("config.txt")).unwrap();
    let snap = snap.replace(first.to_str().unwrap(), second.to_str().unwrap());
    fs::write(dir.path().join("replay.txt"), snap).unwrap();
    proxvi(&["fit", "--config", dir.path().join("replay.txt").to_str().unwrap()], dir.path());
    assert_eq!(fs::read(first.join("trace.csv")).unwrap(), fs::read(second.join("trace.csv")).unwrap());
}

#[test]
fn sweep_reports_each_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = proxvi(
        &["sweep", "--method", "gd", "--grid", "1e-6,1e3", "--passes", "5", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(stdout(&o).contains("largest non-diverging step: 1.0000e-6"));
}

#[test]
fn ctm_fit_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ctm");
    let o = proxvi(
        &["ctm-fit", "--synthetic", "3,20,40,60", "--heldout-fraction", "0.5", "--passes", "30", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = |f: &str| out.join(f).display().to_string();
    let o = proxvi(
        &["ctm-eval", "--q", &p("q.txt"), "--heldout", &p("heldout.txt"), "--topic-word", &p("topic_word.csv"), "--prior-cov", &p("prior_cov.csv"), "--samples", "2000"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let margin: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("margin:"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(margin > 0.0);
}
