//! Gradient baselines on `λ = (m, L)` with `V = L Lᵀ`.
//!
//! `λ` stores `m` followed by the lower triangle of `L` row by row. All
//! optimizers descend the negative ELBO; `g` below is its gradient.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, domain, Result};
use crate::estimators::{example_gradient, example_seed, select_minibatch, GradientMode, Sampling};
use crate::linalg::{CholeskyFactor, SymmetricMatrix};
use crate::models::{GaussianVariational, ModelSplit, Prior};
use crate::rng::mix;
use crate::solver::{check_batch, drive, Evaluator, IterationRecord, Iterate, PassConfig, SolverRun, StopRule};

/// Smallest diagonal entry allowed in `L`.
pub const DIAG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Gd,
    Sgd,
    Adagrad,
    Rmsprop,
    Adadelta,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::Gd,
        OptimizerKind::Sgd,
        OptimizerKind::Adagrad,
        OptimizerKind::Rmsprop,
        OptimizerKind::Adadelta,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

/// Hyperparameters; fields a kind does not use are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub alpha0: f64,
    /// SGD decay exponent.
    pub kappa: f64,
    /// RMSprop and ADADELTA decay.
    pub rho: f64,
    pub rho_mu: f64,
    pub rho_s: f64,
    pub eps: f64,
}

impl Hyperparams {
    fn base(alpha0: f64) -> Self {
        Self {
            alpha0,
            kappa: 0.0,
            rho: 0.0,
            rho_mu: 0.0,
            rho_s: 0.0,
            eps: 1e-8,
        }
    }

    pub fn gd(alpha: f64) -> Self {
        Self::base(alpha)
    }

    pub fn sgd(alpha0: f64, kappa: f64) -> Self {
        Self { kappa, ..Self::base(alpha0) }
    }

    pub fn adagrad(alpha0: f64) -> Self {
        Self::base(alpha0)
    }

    pub fn rmsprop(alpha0: f64, rho: f64) -> Self {
        Self { rho, ..Self::base(alpha0) }
    }

    pub fn adadelta(alpha0: f64, one_minus_rho: f64) -> Self {
        Self {
            rho: 1.0 - one_minus_rho,
            ..Self::base(alpha0)
        }
    }

    pub fn adam(alpha0: f64, rho_mu: f64, rho_s: f64) -> Self {
        Self {
            rho_mu,
            rho_s,
            ..Self::base(alpha0)
        }
    }

    fn validate(&self, kind: OptimizerKind) -> Result<()> {
        if !(self.alpha0 > 0.0) || !self.alpha0.is_finite() {
            return Err(domain(format!("alpha0 = {} must be finite and > 0", self.alpha0)));
        }
        if !(self.eps >= 0.0) {
            return Err(domain("eps must be >= 0"));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(domain(format!("{name} = {v} must lie in [0, 1)")))
            }
        };
        match kind {
            OptimizerKind::Sgd if !(self.kappa >= 0.0) => Err(domain("kappa must be >= 0")),
            OptimizerKind::Rmsprop | OptimizerKind::Adadelta => unit("rho", self.rho),
            OptimizerKind::Adam => unit("rho_mu", self.rho_mu).and(unit("rho_s", self.rho_s)),
            _ => Ok(()),
        }
    }
}

/// Benchmark datasets with reference optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkDataset {
    Sonar,
    Ionosphere,
    Usps,
}

impl BenchmarkDataset {
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkDataset::Sonar => "sonar",
            BenchmarkDataset::Ionosphere => "ionosphere",
            BenchmarkDataset::Usps => "usps",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::Sonar, Self::Ionosphere, Self::Usps]
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
    }

    pub fn minibatch(self) -> usize {
        match self {
            BenchmarkDataset::Usps => 20,
            _ => 5,
        }
    }

    pub fn mc_samples(self) -> usize {
        match self {
            BenchmarkDataset::Ionosphere => 500,
            _ => 2000,
        }
    }

    /// `(log l, log σ)` of the squared-exponential kernel.
    pub fn kernel_params(self) -> (f64, f64) {
        match self {
            BenchmarkDataset::Sonar => (-1.0, 6.0),
            BenchmarkDataset::Ionosphere => (1.0, 2.5),
            BenchmarkDataset::Usps => (2.5, 5.0),
        }
    }

    pub fn train_size(self) -> usize {
        match self {
            BenchmarkDataset::Sonar => 165,
            BenchmarkDataset::Ionosphere => 280,
            BenchmarkDataset::Usps => 884,
        }
    }

    /// PG-SVI `β · N`.
    pub fn pg_beta_times_n(self) -> f64 {
        match self {
            BenchmarkDataset::Sonar => 0.2,
            BenchmarkDataset::Ionosphere => 2.0,
            BenchmarkDataset::Usps => 2.5,
        }
    }

    /// Published settings for `kind`; `n` converts `α₀ · N` for SGD. GD has none.
    pub fn preset(self, kind: OptimizerKind, n: usize) -> Option<Hyperparams> {
        use BenchmarkDataset::*;
        let pick = |s: f64, i: f64, u: f64| match self {
            Sonar => s,
            Ionosphere => i,
            Usps => u,
        };
        Some(match kind {
            OptimizerKind::Gd => return None,
            OptimizerKind::Sgd => Hyperparams::sgd(pick(1200.0, 25.0, 800.0) / n as f64, pick(0.8, 0.51, 0.6)),
            OptimizerKind::Adagrad => Hyperparams::adagrad(pick(4.5, 4.0, 8.0)),
            OptimizerKind::Rmsprop => Hyperparams::rmsprop(pick(0.1, 0.04, 0.1), pick(0.9, 0.9999, 0.9)),
            OptimizerKind::Adadelta => Hyperparams::adadelta(pick(1.0, 0.1, 1.0), pick(5e-10, 1e-11, 1e-12)),
            OptimizerKind::Adam => Hyperparams::adam(pick(0.04, 0.25, 2.5), 0.9, 0.999),
        })
    }
}

/// Looks up a preset named `kind/dataset`, e.g. `adam/ionosphere`.
pub fn named_preset(name: &str, n: usize) -> Result<(OptimizerKind, Hyperparams)> {
    let (k, d) = name
        .split_once('/')
        .ok_or_else(|| domain(format!("preset '{name}' is not of the form kind/dataset")))?;
    let kind = OptimizerKind::from_name(k).ok_or_else(|| domain(format!("unknown optimizer '{k}'")))?;
    let ds = BenchmarkDataset::from_name(d).ok_or_else(|| domain(format!("unknown dataset '{d}'")))?;
    let h = ds
        .preset(kind, n)
        .ok_or_else(|| domain(format!("no preset for {k} on {d}")))?;
    Ok((kind, h))
}

fn packed_len(d: usize) -> usize {
    d + d * (d + 1) / 2
}

fn tri_index(d: usize, i: usize, j: usize) -> usize {
    d + i * (i + 1) / 2 + j
}

/// Packs `(m, lower(L))` into `λ`.
pub fn pack(m: &DVector<f64>, l: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = m.len();
    check_dim(d, l.nrows())?;
    check_dim(d, l.ncols())?;
    let mut out = Vec::with_capacity(packed_len(d));
    out.extend(m.iter());
    for i in 0..d {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
    Ok(out)
}

/// Inverse of [`pack`].
pub fn unpack(lambda: &[f64], d: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dim(packed_len(d), lambda.len())?;
    let m = DVector::from_column_slice(&lambda[..d]);
    let mut l = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = lambda[tri_index(d, i, j)];
        }
    }
    Ok((m, l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub hyper: Hyperparams,
    pub lambda: Vec<f64>,
    /// Second-moment accumulator.
    pub s: Vec<f64>,
    /// First-moment accumulator (ADAM).
    pub mu: Vec<f64>,
    /// Squared-update accumulator (ADADELTA).
    pub delta: Vec<f64>,
    /// Number of steps taken.
    pub k: usize,
    dim: usize,
}

impl OptimizerState {
    /// `lambda` must have length `d + d(d+1)/2`.
    pub fn new(kind: OptimizerKind, hyper: Hyperparams, lambda: Vec<f64>, d: usize) -> Result<Self> {
        hyper.validate(kind)?;
        check_dim(packed_len(d), lambda.len())?;
        let p = lambda.len();
        let mut s = Self {
            kind,
            hyper,
            lambda,
            s: vec![0.0; p],
            mu: vec![0.0; p],
            delta: vec![0.0; p],
            k: 0,
            dim: d,
        };
        s.clamp_diagonal();
        Ok(s)
    }

    pub fn from_moments(kind: OptimizerKind, hyper: Hyperparams, m: &DVector<f64>, l: &DMatrix<f64>) -> Result<Self> {
        Self::new(kind, hyper, pack(m, l)?, m.len())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.lambda[..self.dim])
    }

    pub fn cholesky(&self) -> DMatrix<f64> {
        unpack(&self.lambda, self.dim).expect("length checked at construction").1
    }

    /// `N(m, L Lᵀ)`.
    pub fn variational(&self) -> Result<GaussianVariational> {
        let (m, l) = unpack(&self.lambda, self.dim)?;
        GaussianVariational::from_cholesky(m, l)
    }

    fn clamp_diagonal(&mut self) {
        for i in 0..self.dim {
            let idx = tri_index(self.dim, i, i);
            // NaN passes through so divergence stays visible.
            if self.lambda[idx] < DIAG_FLOOR {
                self.lambda[idx] = DIAG_FLOOR;
            }
        }
    }

    /// Step size used by the next SGD or GD step.
    pub fn current_step_size(&self) -> f64 {
        match self.kind {
            OptimizerKind::Sgd => self.hyper.alpha0 * ((self.k + 1) as f64).powf(-self.hyper.kappa),
            _ => self.hyper.alpha0,
        }
    }
}

/// Applies one update of `state.kind` with gradient `g` of the negative ELBO.
pub fn optimizer_step(state: &mut OptimizerState, g: &[f64]) -> Result<()> {
    check_dim(state.lambda.len(), g.len())?;
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(domain(format!("gradient entry {i} is not finite")));
    }
    let h = state.hyper;
    let eps = h.eps;
    match state.kind {
        OptimizerKind::Gd | OptimizerKind::Sgd => {
            let a = state.current_step_size();
            for (l, gi) in state.lambda.iter_mut().zip(g) {
                *l -= a * gi;
            }
        }
        OptimizerKind::Adagrad => {
            for i in 0..g.len() {
                state.s[i] += g[i] * g[i];
                state.lambda[i] -= h.alpha0 * g[i] / (state.s[i] + eps).sqrt();
            }
        }
        OptimizerKind::Rmsprop => {
            for i in 0..g.len() {
                state.s[i] = h.rho * state.s[i] + (1.0 - h.rho) * g[i] * g[i];
                state.lambda[i] -= h.alpha0 * g[i] / (state.s[i] + eps).sqrt();
            }
        }
        OptimizerKind::Adadelta => {
            for i in 0..g.len() {
                state.s[i] = h.rho * state.s[i] + (1.0 - h.rho) * g[i] * g[i];
                let g_ad = h.alpha0 * ((state.delta[i] + eps).sqrt() / (state.s[i] + eps).sqrt()) * g[i];
                state.lambda[i] -= g_ad;
                state.delta[i] = h.rho * state.delta[i] + (1.0 - h.rho) * g_ad * g_ad;
            }
        }
        OptimizerKind::Adam => {
            let k = (state.k + 1) as i32;
            let bias_mu = 1.0 - h.rho_mu.powi(k);
            let bias_s = 1.0 - h.rho_s.powi(k);
            for i in 0..g.len() {
                state.mu[i] = h.rho_mu * state.mu[i] + (1.0 - h.rho_mu) * g[i];
                state.s[i] = h.rho_s * state.s[i] + (1.0 - h.rho_s) * g[i] * g[i];
                let g_s = (state.s[i] / bias_s).sqrt();
                state.lambda[i] -= h.alpha0 * (state.mu[i] / bias_mu) / (g_s + eps);
            }
        }
    }
    state.k += 1;
    state.clamp_diagonal();
    Ok(())
}

/// Maps `(∇_m, ∇_V)` to the packed gradient over `(m, L)`:
/// `∇_L = lower((∇_V + ∇_Vᵀ) L)`.
pub fn chain_rule_to_cholesky(grad_m: &DVector<f64>, grad_v: &SymmetricMatrix, l: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = grad_m.len();
    check_dim(d, grad_v.order())?;
    check_dim(d, l.nrows())?;
    check_dim(d, l.ncols())?;
    let g = grad_v.as_matrix();
    let gl = (g + g.transpose()) * l;
    pack(grad_m, &gl)
}

/// Run configuration for a baseline optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kind: OptimizerKind,
    pub hyper: Hyperparams,
    pub minibatch: usize,
    pub sampling: Sampling,
    pub gradient: GradientMode,
    pub stop: StopRule,
    pub seed: u64,
    pub record_timing: bool,
}

impl BaselineConfig {
    /// Deterministic GD with step `alpha` on all `n` examples.
    pub fn full_batch_gd(alpha: f64, n: usize) -> Self {
        Self {
            kind: OptimizerKind::Gd,
            hyper: Hyperparams::gd(alpha),
            minibatch: n,
            sampling: Sampling::WithoutReplacement,
            gradient: GradientMode::Quadrature,
            stop: StopRule::default(),
            seed: 0,
            record_timing: false,
        }
    }

    pub fn stochastic(kind: OptimizerKind, hyper: Hyperparams, minibatch: usize, gradient: GradientMode, seed: u64) -> Self {
        Self {
            kind,
            hyper,
            minibatch,
            sampling: Sampling::WithReplacement,
            gradient,
            stop: StopRule::default(),
            seed,
            record_timing: false,
        }
    }
}

struct BaselineRunner<'a> {
    model: &'a ModelSplit,
    cfg: &'a BaselineConfig,
    state: OptimizerState,
    /// `K⁻¹` for a GP prior, `XᵀX`-free identity for a GLM.
    prior_precision: Option<DMatrix<f64>>,
}

impl<'a> BaselineRunner<'a> {
    fn new(model: &'a ModelSplit, cfg: &'a BaselineConfig) -> Result<Self> {
        let d = model.latent_dim();
        let (l0, prior_precision) = match &model.prior {
            Prior::Gp(p) => (p.chol().lower().clone(), Some(p.chol().inverse().into_inner())),
            Prior::Glm(_) => (DMatrix::identity(d, d), None),
        };
        let state = OptimizerState::from_moments(cfg.kind, cfg.hyper, &DVector::zeros(d), &l0)?;
        Ok(Self {
            model,
            cfg,
            state,
            prior_precision,
        })
    }

    /// Packed gradient of the negative ELBO from marginal gradients `(a, b)`.
    ///
    /// The `−½ V⁻¹` term contributes `−L⁻ᵀ`, whose lower triangle is
    /// `−diag(1/L_ii)`.
    fn gradient(&self, a: &DVector<f64>, b: &DVector<f64>, m: &DVector<f64>, l: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (gm, mut gl) = match (&self.model.prior, &self.prior_precision) {
            (Prior::Gp(_), Some(k_inv)) => {
                let mut dl = k_inv * l;
                for (i, mut row) in dl.row_iter_mut().enumerate() {
                    row += l.row(i) * (2.0 * b[i]);
                }
                (a + k_inv * m, dl)
            }
            (Prior::Glm(x), _) => {
                let xl = x.as_ref() * l;
                let mut bxl = xl;
                for (mut row, s) in bxl.row_iter_mut().zip(b.iter()) {
                    row *= 2.0 * s;
                }
                (x.transpose() * a + m, x.transpose() * bxl + l)
            }
            _ => unreachable!("precision matches prior by construction"),
        };
        for i in 0..l.nrows() {
            gl[(i, i)] -= 1.0 / l[(i, i)];
        }
        pack(&gm, &gl)
    }
}

impl Iterate for BaselineRunner<'_> {
    fn step(&mut self, iter: usize) -> Result<IterationRecord> {
        let n = self.model.num_examples();
        let mb = self.cfg.minibatch;
        let seed = mix(self.cfg.seed, iter as u64, 0);
        let batch = select_minibatch(n, mb, self.cfg.sampling, seed)?;
        let scale = n as f64 / mb as f64;
        let (m, l) = unpack(&self.state.lambda, self.state.dim)?;
        let (means, x_rows): (DVector<f64>, Option<DMatrix<f64>>) = match &self.model.prior {
            Prior::Gp(_) => (m.clone(), None),
            Prior::Glm(x) => (x.as_ref() * &m, Some(x.as_ref() * &l)),
        };
        let mut a = DVector::zeros(n);
        let mut b = DVector::zeros(n);
        for (pos, &i) in batch.iter().enumerate() {
            let v = match &x_rows {
                None => l.row(i).norm_squared(),
                Some(xl) => xl.row(i).norm_squared(),
            };
            let eg = example_gradient(self.model, i, means[i], v, self.cfg.gradient, example_seed(seed, pos))?;
            a[i] += scale * eg.d_m;
            b[i] += scale * eg.d_v;
        }
        let g = self.gradient(&a, &b, &m, &l)?;
        let step = self.state.current_step_size();
        let grad_norm_sq: f64 = g.iter().map(|v| v * v).sum();
        if let Err(e) = optimizer_step(&mut self.state, &g) {
            warn!("iteration {iter}: {e}");
            self.state.lambda[0] = f64::NAN;
        }
        Ok(IterationRecord {
            grad_norm_sq,
            beta: step,
            minibatch: batch,
        })
    }

    fn q(&self) -> Result<GaussianVariational> {
        self.state.variational()
    }

    fn finite(&self) -> bool {
        self.state.lambda.iter().all(|v| v.is_finite())
    }
}

/// Runs a baseline from `q₀ = prior` until the stop rule fires.
///
/// Trace rows report `‖g‖²` of the last iteration in `grad_norm_sq` and the
/// step size in `beta`.
pub fn run_baseline(model: &ModelSplit, cfg: &BaselineConfig, evaluator: Option<Evaluator<'_>>) -> Result<SolverRun> {
    check_batch(model, cfg.minibatch, cfg.gradient)?;
    let mut runner = BaselineRunner::new(model, cfg)?;
    let passes = PassConfig {
        stop: cfg.stop,
        per_pass: model.num_examples().div_ceil(cfg.minibatch),
        seed: cfg.seed,
        record_timing: cfg.record_timing,
        initial_step: runner.state.current_step_size(),
    };
    drive(model, &mut runner, &passes, evaluator)
}

/// Factor of `V` held in a packed `λ`; fails unless `diag(L) > 0`.
pub fn covariance_factor_of(lambda: &[f64], d: usize) -> Result<CholeskyFactor> {
    let (_, l) = unpack(lambda, d)?;
    CholeskyFactor::from_lower(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{se_kernel, KernelConfig};
    use crate::models::{elbo, GpPrior};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn scalar_state(kind: OptimizerKind, hyper: Hyperparams) -> OptimizerState {
        OptimizerState::new(kind, hyper, vec![0.5, 1.0], 1).unwrap()
    }

    fn hyper_for(kind: OptimizerKind) -> Hyperparams {
        match kind {
            OptimizerKind::Gd => Hyperparams::gd(0.1),
            OptimizerKind::Sgd => Hyperparams::sgd(0.1, 0.5),
            OptimizerKind::Adagrad => Hyperparams::adagrad(0.1),
            OptimizerKind::Rmsprop => Hyperparams::rmsprop(0.1, 0.9),
            OptimizerKind::Adadelta => Hyperparams::adadelta(0.1, 0.1),
            OptimizerKind::Adam => Hyperparams::adam(0.1, 0.9, 0.999),
        }
    }

    #[test]
    fn zero_gradient_leaves_lambda() {
        for kind in OptimizerKind::ALL {
            let mut s = scalar_state(kind, hyper_for(kind));
            optimizer_step(&mut s, &[0.0, 0.0]).unwrap();
            assert_eq!(s.lambda, vec![0.5, 1.0], "{kind:?}");
            assert_eq!(s.k, 1);
        }
    }

    #[test]
    fn sgd_decay() {
        let mut s = scalar_state(OptimizerKind::Sgd, Hyperparams::sgd(0.3, 0.5));
        s.k = 3;
        assert!((s.current_step_size() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn adagrad_first_step_is_sign() {
        let mut s = OptimizerState::new(OptimizerKind::Adagrad, Hyperparams::adagrad(0.2), vec![0.0, 1.0], 1).unwrap();
        optimizer_step(&mut s, &[3.0, 0.0]).unwrap();
        assert!((s.lambda[0] + 0.2 * 3.0 / (9.0f64 + 1e-8).sqrt()).abs() < 1e-16);
        assert!((s.lambda[0] + 0.2).abs() < 1e-9);
    }

    #[test]
    fn rmsprop_without_decay_first_step_matches_adagrad() {
        let g = [0.7, -1.3];
        let mut a = scalar_state(OptimizerKind::Adagrad, Hyperparams::adagrad(0.05));
        let mut r = scalar_state(OptimizerKind::Rmsprop, Hyperparams::rmsprop(0.05, 0.0));
        optimizer_step(&mut a, &g).unwrap();
        optimizer_step(&mut r, &g).unwrap();
        assert_eq!(a.lambda, r.lambda);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = scalar_state(OptimizerKind::Adam, hyper_for(OptimizerKind::Adam));
        let before = s.clone();
        assert!(optimizer_step(&mut s, &[f64::NAN, 0.0]).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn diagonal_is_clamped() {
        let mut s = scalar_state(OptimizerKind::Gd, Hyperparams::gd(1.0));
        optimizer_step(&mut s, &[0.0, 5.0]).unwrap();
        assert_eq!(s.lambda[1], DIAG_FLOOR);
    }

    #[test]
    fn chain_rule_examples() {
        let l = DMatrix::from_element(1, 1, 0.7);
        let g = chain_rule_to_cholesky(&DVector::from_element(1, 0.3), &SymmetricMatrix::from_diagonal(&[2.0]).unwrap(), &l).unwrap();
        assert_eq!(g, vec![0.3, 2.0 * 2.0 * 0.7]);
        let z = chain_rule_to_cholesky(&DVector::zeros(3), &SymmetricMatrix::from_diagonal(&[0.0; 3]).unwrap(), &DMatrix::identity(3, 3)).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 5;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let c = SymmetricMatrix::from_upper(&a + a.transpose()).unwrap();
        let mut l = DMatrix::from_fn(d, d, |i, j| if j <= i { rng.random_range(-0.5..0.5) } else { 0.0 });
        for i in 0..d {
            l[(i, i)] += 1.5;
        }
        // f(V) = tr(C V) + ½ tr(V²); ∂f/∂V = C + V.
        let f = |l: &DMatrix<f64>| {
            let v = l * l.transpose();
            (c.as_matrix() * &v).trace() + 0.5 * (&v * &v).trace()
        };
        let v = SymmetricMatrix::from_upper(&l * l.transpose()).unwrap();
        let gv = c.combine(1.0, &v, 1.0).unwrap();
        let g = chain_rule_to_cholesky(&DVector::zeros(d), &gv, &l).unwrap();
        let h = 1e-6;
        for i in 0..d {
            for j in 0..=i {
                let mut lp = l.clone();
                lp[(i, j)] += h;
                let mut lm = l.clone();
                lm[(i, j)] -= h;
                let fd = (f(&lp) - f(&lm)) / (2.0 * h);
                let an = g[tri_index(d, i, j)];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "({i},{j}): {fd} vs {an}");
            }
        }
    }

    fn small_model(n: usize, seed: u64) -> ModelSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n).map(|i| if x[(i, 0)] > 0.0 { 1.0 } else { -1.0 }).collect();
        let k = se_kernel(&x, &KernelConfig::new(0.0, 0.0).with_jitter(1e-2)).unwrap();
        ModelSplit::gp_classification(Arc::new(GpPrior::new(k).unwrap()), y).unwrap()
    }

    #[test]
    fn packed_gradient_matches_general_chain_rule() {
        let model = small_model(6, 3);
        let cfg = BaselineConfig::full_batch_gd(0.1, 6);
        let runner = BaselineRunner::new(&model, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let mut l = runner.state.cholesky() * 0.8;
        l[(3, 1)] += 0.2;
        let q = GaussianVariational::full(m.clone(), SymmetricMatrix::from_upper(&l * l.transpose()).unwrap()).unwrap();
        let marg = model.marginals(&q).unwrap();
        let (_, a, b) = model.difficult_total(&marg).unwrap();
        let fast = runner.gradient(&a, &b, &m, &l).unwrap();
        let (gm, gv) = model.neg_elbo_gradient(&q, &a, &b).unwrap();
        let slow = chain_rule_to_cholesky(&gm, &gv, &l).unwrap();
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() <= 1e-8 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn packed_gradient_matches_elbo_finite_differences() {
        let model = small_model(4, 5);
        let cfg = BaselineConfig::full_batch_gd(0.1, 4);
        let runner = BaselineRunner::new(&model, &cfg).unwrap();
        let lambda = runner.state.lambda.clone();
        let neg_elbo = |lam: &[f64]| {
            let (m, l) = unpack(lam, 4).unwrap();
            let q = GaussianVariational::full(m, SymmetricMatrix::from_upper(&l * l.transpose()).unwrap()).unwrap();
            -elbo(&model, &q).unwrap()
        };
        let (m, l) = unpack(&lambda, 4).unwrap();
        let q = GaussianVariational::full(m.clone(), SymmetricMatrix::from_upper(&l * l.transpose()).unwrap()).unwrap();
        let (_, a, b) = model.difficult_total(&model.marginals(&q).unwrap()).unwrap();
        let g = runner.gradient(&a, &b, &m, &l).unwrap();
        let h = 1e-5;
        for i in 0..lambda.len() {
            let mut p = lambda.clone();
            p[i] += h;
            let mut q = lambda.clone();
            q[i] -= h;
            let fd = (neg_elbo(&p) - neg_elbo(&q)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn small_gd_step_improves_elbo() {
        let model = small_model(20, 2);
        let mut cfg = BaselineConfig::full_batch_gd(0.005, 20);
        cfg.stop.max_passes = 30;
        let run = run_baseline(&model, &cfg, None).unwrap();
        let e: Vec<f64> = run.trace.rows.iter().map(|r| r.elbo).collect();
        assert!(e.last().unwrap() > &e[0]);
        assert!(!run.trace.diverged());
    }

    #[test]
    fn presets_resolve() {
        let (k, h) = named_preset("adam/ionosphere", 280).unwrap();
        assert_eq!(k, OptimizerKind::Adam);
        assert_eq!((h.alpha0, h.rho_mu, h.rho_s), (0.25, 0.9, 0.999));
        let (_, h) = named_preset("sgd/sonar", 165).unwrap();
        assert!((h.alpha0 * 165.0 - 1200.0).abs() < 1e-9);
        assert!(named_preset("gd/sonar", 165).is_err());
        assert!(named_preset("adam", 10).is_err());
    }

    proptest! {
        #[test]
        fn covariance_stays_positive_definite(seed in 0u64..1000, kind_ix in 0usize..6) {
            let kind = OptimizerKind::ALL[kind_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let mut s = OptimizerState::new(kind, hyper_for(kind), pack(&DVector::zeros(d), &DMatrix::identity(d, d)).unwrap(), d).unwrap();
            for _ in 0..20 {
                let g: Vec<f64> = (0..s.lambda.len()).map(|_| rng.random_range(-20.0..20.0)).collect();
                optimizer_step(&mut s, &g).unwrap();
                prop_assert!(covariance_factor_of(&s.lambda, d).is_ok());
                prop_assert!(s.s.iter().all(|v| *v >= 0.0));
            }
        }
    }
}
