//! Quick invariant checks runnable from an installed binary.

use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use proxvi::baselines::{optimizer_step, Hyperparams, OptimizerKind, OptimizerState};
use proxvi::divergences::{symmetric_kl_decomposition_check, GaussianParams};
use proxvi::harness::{registry, sha256_hex};
use proxvi::linalg::{se_kernel, KernelConfig, SymmetricMatrix};
use proxvi::models::{GpPrior, Likelihood};
use proxvi::rng::stream;
use proxvi::solver::{full_oracle_step, pg_svi_gp_step, GpSolverState, MeanUpdate};

type Check = fn() -> Result<(bool, String)>;

fn oracle() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let mut rng = stream(inst, 0, 0xC0DE);
        let n = rng.random_range(1..=12);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
        let prior = Arc::new(GpPrior::new(se_kernel(&x, &KernelConfig::new(0.0, 0.0).with_jitter(1e-2))?)?);
        let mut s = GpSolverState::new(n, 1e-300)?;
        let mut m = DVector::zeros(n);
        let mut v = prior.kernel().clone();
        for _ in 0..30 {
            let (i, a, g, b) = (rng.random_range(0..n), rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0), rng.random_range(0.05..2.0));
            pg_svi_gp_step(&mut s, &prior, i, a, g, b, MeanUpdate::Exact)?;
            (m, v) = full_oracle_step(&m, &v, prior.kernel(), i, a, g, b)?;
            let d = s.marginal_variances(&prior)?;
            let scale_m = m.amax().max(f64::MIN_POSITIVE);
            worst = worst.max((&s.m - &m).amax() / scale_m);
            for j in 0..n {
                worst = worst.max((d[j] - v.get(j, j)).abs() / v.get(j, j));
            }
        }
    }
    Ok((worst <= 1e-10, format!("compact vs full-matrix step, max rel {worst:.1e}")))
}

fn sym_kl() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut rng = stream(1, 0, 0x5C1);
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let mut draw = || -> Result<GaussianParams> {
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let cov = SymmetricMatrix::from_upper(&a * a.transpose() + DMatrix::identity(d, d) * 0.3)?;
            Ok(GaussianParams::new(DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)), cov)?)
        };
        let (p, q) = (draw()?, draw()?);
        worst = worst.max(symmetric_kl_decomposition_check(&p, &q)?);
    }
    Ok((worst <= 1e-10, format!("SymKL = KL + reverse KL, max abs {worst:.1e}")))
}

fn quadrature_gradients() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut rng = stream(2, 0, 0x9AD);
    for _ in 0..50 {
        let lik = Likelihood::BernoulliLogit;
        let (y, m, v) = (if rng.random_bool(0.5) { 1.0 } else { -1.0 }, rng.random_range(-4.0..4.0), rng.random_range(0.1..4.0));
        let t = lik.expected_nll(y, m, v)?;
        let h = 1e-5;
        let fd_m = (lik.expected_nll(y, m + h, v)?.value - lik.expected_nll(y, m - h, v)?.value) / (2.0 * h);
        let fd_v = (lik.expected_nll(y, m, v + h)?.value - lik.expected_nll(y, m, v - h)?.value) / (2.0 * h);
        worst = worst.max((t.d_m - fd_m).abs() / t.d_m.abs().max(1e-6)).max((t.d_v - fd_v).abs() / t.d_v.abs().max(1e-6));
    }
    Ok((worst <= 1e-4, format!("logistic expected NLL vs finite differences, max rel {worst:.1e}")))
}

fn rmsprop_adagrad() -> Result<(bool, String)> {
    let g = [0.3, -0.7];
    let mut a = OptimizerState::new(OptimizerKind::Adagrad, Hyperparams::adagrad(0.1), vec![0.2, 1.0], 1)?;
    let mut r = OptimizerState::new(OptimizerKind::Rmsprop, Hyperparams::rmsprop(0.1, 0.0), vec![0.2, 1.0], 1)?;
    optimizer_step(&mut a, &g)?;
    optimizer_step(&mut r, &g)?;
    Ok((a.lambda == r.lambda, "RMSprop with rho = 0 equals ADAGRAD after one step".into()))
}

fn bundled_data() -> Result<(bool, String)> {
    let mut ok = true;
    let mut names = Vec::new();
    for src in registry() {
        if let (Some(bytes), Some(sha)) = (src.bundled, src.sha256) {
            ok &= sha256_hex(bytes) == sha;
            names.push(src.name);
        }
    }
    Ok((ok, format!("bundled dataset checksums ({})", names.join(", "))))
}

pub fn run() -> Result<ExitCode> {
    let checks: [(&str, Check); 5] = [
        ("oracle", oracle),
        ("divergences", sym_kl),
        ("gradients", quadrature_gradients),
        ("baselines", rmsprop_adagrad),
        ("data", bundled_data),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!ok);
        println!("{:<12} {} {detail}", name, if ok { "ok  " } else { "FAIL" });
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
