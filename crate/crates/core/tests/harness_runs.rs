//! End-to-end runs through the harness on a small synthetic dataset.

use std::fs;
use std::path::Path;

use proxvi::harness::{
    read_trace_csv, run_experiment, stepsize_sweep, ExperimentConfig, LabelSpec, MethodId,
};
use proxvi::baselines::OptimizerKind;
use proxvi::solver::{first_converged_pass, RunStatus};

fn write_dataset(path: &Path) {
    let mut s = String::new();
    for i in 0..48 {
        let a = (i as f64 * 0.37).sin() * 2.0;
        let b = (i as f64 * 0.91).cos();
        let label = if a + 0.5 * b > 0.0 { 1 } else { -1 };
        s.push_str(&format!("{a},{b},{label}\n"));
    }
    fs::write(path, s).unwrap();
}

fn config(dir: &Path, method: MethodId) -> ExperimentConfig {
    let data = dir.join("toy.csv");
    if !data.exists() {
        write_dataset(&data);
    }
    let mut c = ExperimentConfig::for_dataset("ionosphere", method).unwrap();
    c.dataset = data.display().to_string();
    c.labels = LabelSpec::Numeric;
    c.train = 36;
    c.log_length_scale = 0.0;
    c.log_signal_std = 0.0;
    c.preset = None;
    c.beta = 0.5;
    c.minibatch = if method.is_full_batch() { 36 } else { 4 };
    c.passes = 30;
    c
}

#[test]
fn zero_pass_budget_writes_initial_row_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), MethodId::Pg);
    c.passes = 0;
    c.out = Some(dir.path().join("run"));
    run_experiment(&c).unwrap();
    let text = fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("pass,iteration,elbo,test_logloss,grad_norm_sq,beta,wall_ms"));
}

#[test]
fn same_seed_gives_byte_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let mut c = config(dir.path(), MethodId::PgSvi);
        c.passes = 5;
        c.seed = 11;
        c.out = Some(dir.path().join(run));
        run_experiment(&c).unwrap();
        traces.push(fs::read(dir.path().join(run).join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn snapshot_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), MethodId::PgSvi);
    c.passes = 4;
    c.seed = 3;
    c.out = Some(dir.path().join("first"));
    run_experiment(&c).unwrap();
    let snap = fs::read_to_string(dir.path().join("first/config.txt")).unwrap();
    let mut replay = ExperimentConfig::from_snapshot(&snap).unwrap();
    assert_eq!(replay, c);
    replay.out = Some(dir.path().join("second"));
    run_experiment(&replay).unwrap();
    assert_eq!(
        fs::read(dir.path().join("first/trace.csv")).unwrap(),
        fs::read(dir.path().join("second/trace.csv")).unwrap()
    );
}

#[test]
fn summary_passes_to_converge_matches_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), MethodId::Pg);
    c.passes = 200;
    c.out = Some(dir.path().join("run"));
    let out = run_experiment(&c).unwrap();
    assert_eq!(out.summary.status, RunStatus::Converged);
    let rows = read_trace_csv(&dir.path().join("run/trace.csv")).unwrap();
    let elbos: Vec<f64> = rows.iter().map(|r| r.elbo).collect();
    assert_eq!(out.summary.passes_to_converge, first_converged_pass(&elbos, c.threshold));
    let summary = fs::read_to_string(dir.path().join("run/summary.csv")).unwrap();
    assert!(summary.contains("converged"));
    assert!(out.summary.final_test_logloss.unwrap() < std::f64::consts::LN_2);
}

#[test]
fn huge_gd_steps_all_diverge() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), MethodId::Baseline(OptimizerKind::Gd));
    c.test_logloss = false;
    let rows = stepsize_sweep(&c, &[1e3, 1e4, 1e5]).unwrap();
    assert!(rows.iter().all(|r| r.diverged), "{rows:?}");
}

#[test]
fn tiny_pg_step_converges() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), MethodId::Pg);
    c.passes = 50;
    let rows = stepsize_sweep(&c, &[1e-7]).unwrap();
    assert!(!rows[0].diverged);
    assert!(rows[0].passes_to_converge.is_some());
}
