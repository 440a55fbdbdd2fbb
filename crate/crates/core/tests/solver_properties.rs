//! Solver properties checked against closed-form Gaussian results.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use proxvi::linalg::{se_kernel, CholeskyFactor, KernelConfig};
use proxvi::models::{GpPrior, ModelSplit};
use proxvi::solver::{full_oracle_step, pg_svi_gp_step, run_solver, GpSolverState, MeanUpdate, Method, SolverConfig};

fn prior_from(xs: &[f64]) -> Arc<GpPrior> {
    let x = DMatrix::from_column_slice(xs.len(), 1, xs);
    Arc::new(GpPrior::new(se_kernel(&x, &KernelConfig::new(0.0, 0.0).with_jitter(1e-2)).unwrap()).unwrap())
}

#[test]
fn conjugate_regression_reaches_posterior_mean() {
    let xs: Vec<f64> = (0..15).map(|i| -2.0 + 0.3 * i as f64).collect();
    let y: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    let noise = 0.3;
    let prior = prior_from(&xs);
    let model = ModelSplit::gp_regression(prior.clone(), y.clone(), noise).unwrap();
    let mut cfg = SolverConfig::full_batch(Method::PgSviCompact, noise, xs.len());
    cfg.stop.max_passes = 500;
    cfg.stop.elbo_delta_threshold = 1e-14;
    let run = run_solver(&model, &cfg, None).unwrap();

    let c = prior.kernel().add_diagonal(&vec![noise; xs.len()]).unwrap();
    let alpha = CholeskyFactor::new(&c).unwrap().solve(&DVector::from_column_slice(&y));
    let exact = prior.kernel().mul_vec(&alpha);
    let err = (&run.q.mean - &exact).amax();
    assert!(err <= 1e-4, "max error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_mode_tracks_full_matrix_step(
        xs in prop::collection::vec(-2.0f64..2.0, 1..8),
        steps in prop::collection::vec((0usize..8, -2.0f64..2.0, 0.0f64..3.0, 0.05f64..2.0), 1..20),
    ) {
        let prior = prior_from(&xs);
        let n = xs.len();
        let mut s = GpSolverState::new(n, 1e-300).unwrap();
        let mut m = DVector::zeros(n);
        let mut v = prior.kernel().clone();
        for (i, a, g, b) in steps {
            let i = i % n;
            pg_svi_gp_step(&mut s, &prior, i, a, g, b, MeanUpdate::Exact).unwrap();
            (m, v) = full_oracle_step(&m, &v, prior.kernel(), i, a, g, b).unwrap();
        }
        let d = s.marginal_variances(&prior).unwrap();
        for j in 0..n {
            prop_assert!((d[j] - v.get(j, j)).abs() <= 1e-9 * v.get(j, j));
            prop_assert!((s.m[j] - m[j]).abs() <= 1e-9 * m.amax().max(1.0));
        }
    }

    #[test]
    fn gamma_tilde_stays_positive(
        xs in prop::collection::vec(-2.0f64..2.0, 1..8),
        steps in prop::collection::vec((0usize..8, -2.0f64..2.0, -5.0f64..3.0, 0.05f64..2.0), 1..20),
    ) {
        let prior = prior_from(&xs);
        let n = xs.len();
        let mut s = GpSolverState::new(n, 1e-6).unwrap();
        for (i, a, g, b) in steps {
            pg_svi_gp_step(&mut s, &prior, i % n, a, g, b, MeanUpdate::Approximate).unwrap();
            prop_assert!(s.gamma_tilde.iter().all(|&x| x > 0.0));
        }
    }
}
