//! The PG-SVI iteration for GP and GLM models.
//!
//! The compact GP state is `(m, γ̃)` with `V⁻¹ = K⁻¹ + diag(γ̃)`. One step with
//! step size `β` and `r = 1/(1+β)` is
//!
//! ```text
//! γ̃ ← r γ̃ + (1 − r) γ
//! m ← m − (1 − r) (I − K (K + W⁻¹)⁻¹) (m + K a)
//! ```
//!
//! where `a = ∇̂_m f`, `γ = 2 ∇̂_v f`, and `W = diag(γ̃_new)` in the default
//! approximate mode or `W = diag(r γ̃_old)` in the exact mode. Solves use
//! `B = I + W^½ K W^½`, so `W` may contain zeros.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, domain, Error, Result};
use crate::estimators::{example_gradient, example_seed, select_minibatch, GradientMode, Sampling};
use crate::linalg::{CholeskyFactor, DiagPrecisionFactor, SymmetricMatrix};
use crate::models::{elbo, Covariance, GaussianVariational, GpPrior, ModelSplit, Prior};
use crate::rng::mix;

/// Initial value of every `γ̃` entry.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Which precision enters the mean update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanUpdate {
    /// `W = diag(γ̃_k)`: one factorization per step, shared with the next marginals.
    Approximate,
    /// `W = diag(r γ̃_{k−1})`: the exact proximal mean.
    Exact,
}

/// Compact GP solver state.
#[derive(Debug, Clone)]
pub struct GpSolverState {
    pub m: DVector<f64>,
    pub gamma_tilde: Vec<f64>,
    pub k: usize,
    /// Initial `γ̃` entry and replacement for nonpositive updates.
    pub epsilon: f64,
    /// `(n, v_n)` from the most recent marginal request.
    pub last_diag: Option<(usize, f64)>,
    pub clamp_events: usize,
    factor: Option<DiagPrecisionFactor>,
}

impl GpSolverState {
    pub fn new(n: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(domain("epsilon must be > 0"));
        }
        Ok(Self {
            m: DVector::zeros(n),
            gamma_tilde: vec![epsilon; n],
            k: 0,
            epsilon,
            last_diag: None,
            clamp_events: 0,
            factor: None,
        })
    }

    fn factor(&mut self, prior: &GpPrior) -> Result<&DiagPrecisionFactor> {
        if self.factor.is_none() {
            self.factor = Some(DiagPrecisionFactor::new(prior.kernel(), &self.gamma_tilde)?);
        }
        Ok(self.factor.as_ref().expect("set above"))
    }

    /// `v_n` of the current `q`.
    pub fn marginal_variance(&mut self, prior: &GpPrior, n: usize) -> Result<f64> {
        let v = self.factor(prior)?.marginal_variance(prior.kernel(), n);
        self.last_diag = Some((n, v));
        Ok(v)
    }

    /// All marginal variances.
    pub fn marginal_variances(&mut self, prior: &GpPrior) -> Result<DVector<f64>> {
        Ok(self.factor(prior)?.marginal_variances(prior.kernel()))
    }

    pub fn to_variational(&self, prior: &std::sync::Arc<GpPrior>) -> Result<GaussianVariational> {
        GaussianVariational::compact(self.m.clone(), self.gamma_tilde.clone(), prior.clone())
    }
}

/// Diagnostics of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// `‖λ_k − λ_{k+1}‖² / β²` in `(m, γ̃)` coordinates.
    pub grad_norm_sq: f64,
    /// Entries of `γ̃` clamped to `ε` in this step.
    pub clamped: usize,
}

fn mixing_weight(beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(domain(format!("step size {beta} must be finite and > 0")));
    }
    Ok(1.0 / (1.0 + beta))
}

/// Updates `γ̃` in place and returns the previous values and clamp count.
fn update_gamma(gamma_tilde: &mut [f64], g: &DVector<f64>, r: f64, epsilon: f64) -> (Vec<f64>, usize) {
    let prev = gamma_tilde.to_vec();
    let mut clamped = 0;
    for (gt, gi) in gamma_tilde.iter_mut().zip(g.iter()) {
        let v = r * *gt + (1.0 - r) * gi;
        *gt = if v <= 0.0 {
            clamped += 1;
            epsilon
        } else {
            v
        };
    }
    (prev, clamped)
}

fn step_norm(m_old: &DVector<f64>, m_new: &DVector<f64>, g_old: &[f64], g_new: &[f64], beta: f64) -> f64 {
    let dm = (m_old - m_new).norm_squared();
    let dg: f64 = g_old.iter().zip(g_new).map(|(a, b)| (a - b) * (a - b)).sum();
    (dm + dg) / (beta * beta)
}

/// One compact step with dense mean gradient `a` and variance contributions `g`.
pub fn pg_svi_gp_step_batch(
    state: &mut GpSolverState,
    prior: &GpPrior,
    a: &DVector<f64>,
    g: &DVector<f64>,
    beta: f64,
    mode: MeanUpdate,
) -> Result<StepInfo> {
    let n = prior.order();
    check_dim(n, state.m.len())?;
    check_dim(n, a.len())?;
    check_dim(n, g.len())?;
    let r = mixing_weight(beta)?;
    let (prev, clamped) = update_gamma(&mut state.gamma_tilde, g, r, state.epsilon);
    if clamped > 0 {
        warn!("step {}: clamped {clamped} entries of gamma_tilde to {}", state.k, state.epsilon);
        state.clamp_events += clamped;
    }
    let factor = match mode {
        MeanUpdate::Approximate => DiagPrecisionFactor::new(prior.kernel(), &state.gamma_tilde)?,
        MeanUpdate::Exact => {
            let w: Vec<f64> = prev.iter().map(|x| r * x).collect();
            DiagPrecisionFactor::new(prior.kernel(), &w)?
        }
    };
    let u = &state.m + prior.kernel().mul_vec(a);
    let m_new = &state.m - factor.apply_residual(prior.kernel(), &u) * (1.0 - r);
    let grad_norm_sq = step_norm(&state.m, &m_new, &prev, &state.gamma_tilde, beta);
    state.m = m_new;
    state.factor = match mode {
        MeanUpdate::Approximate => Some(factor),
        MeanUpdate::Exact => None,
    };
    state.last_diag = None;
    state.k += 1;
    Ok(StepInfo { grad_norm_sq, clamped })
}

/// One compact step driven by a single example `n_k`.
pub fn pg_svi_gp_step(
    state: &mut GpSolverState,
    prior: &GpPrior,
    n_k: usize,
    alpha_nk: f64,
    gamma_nk: f64,
    beta: f64,
    mode: MeanUpdate,
) -> Result<StepInfo> {
    let n = prior.order();
    if n_k >= n {
        return Err(domain(format!("example index {n_k} out of range")));
    }
    let mut a = DVector::zeros(n);
    a[n_k] = alpha_nk;
    let mut g = DVector::zeros(n);
    g[n_k] = gamma_nk;
    pg_svi_gp_step_batch(state, prior, &a, &g, beta, mode)
}

/// Full-matrix oracle step:
///
/// ```text
/// V_{k+1}⁻¹ = r V_k⁻¹ + (1 − r)(K⁻¹ + diag(g))
/// m_{k+1}   = [(1 − r) K⁻¹ + r V_k⁻¹]⁻¹ [r V_k⁻¹ m_k − (1 − r) a]
/// ```
///
/// Loss of positive-definiteness is a hard error.
pub fn full_oracle_step_batch(
    m: &DVector<f64>,
    v: &SymmetricMatrix,
    k: &SymmetricMatrix,
    a: &DVector<f64>,
    g: &DVector<f64>,
    beta: f64,
) -> Result<(DVector<f64>, SymmetricMatrix)> {
    let n = k.order();
    check_dim(n, m.len())?;
    check_dim(n, v.order())?;
    check_dim(n, a.len())?;
    check_dim(n, g.len())?;
    let r = mixing_weight(beta)?;
    let p = CholeskyFactor::new(v)?.inverse();
    let k_inv = CholeskyFactor::new(k)?.inverse();
    let p_next = p.combine(r, &k_inv.add_diagonal(g.as_slice())?, 1.0 - r)?;
    let lhs = k_inv.combine(1.0 - r, &p, r)?;
    let rhs = p.mul_vec(m) * r - a * (1.0 - r);
    let m_next = CholeskyFactor::new(&lhs)?.solve(&rhs);
    let v_next = CholeskyFactor::new(&p_next)?.inverse();
    Ok((m_next, v_next))
}

/// Single-example form of [`full_oracle_step_batch`].
pub fn full_oracle_step(
    m: &DVector<f64>,
    v: &SymmetricMatrix,
    k: &SymmetricMatrix,
    n_k: usize,
    alpha_nk: f64,
    gamma_nk: f64,
    beta: f64,
) -> Result<(DVector<f64>, SymmetricMatrix)> {
    let n = k.order();
    if n_k >= n {
        return Err(domain(format!("example index {n_k} out of range")));
    }
    let mut a = DVector::zeros(n);
    a[n_k] = alpha_nk;
    let mut g = DVector::zeros(n);
    g[n_k] = gamma_nk;
    full_oracle_step_batch(m, v, k, &a, &g, beta)
}

/// GLM solver state: weight mean `m` (length `d`) and `γ̃` over examples,
/// with `V = (I + Xᵀ diag(γ̃) X)⁻¹`.
#[derive(Debug, Clone)]
pub struct GlmSolverState {
    pub m: DVector<f64>,
    pub gamma_tilde: Vec<f64>,
    pub k: usize,
    pub epsilon: f64,
    pub clamp_events: usize,
}

impl GlmSolverState {
    pub fn new(d: usize, n: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(domain("epsilon must be > 0"));
        }
        Ok(Self {
            m: DVector::zeros(d),
            gamma_tilde: vec![epsilon; n],
            k: 0,
            epsilon,
            clamp_events: 0,
        })
    }

    /// `V = (I + Xᵀ diag(γ̃) X)⁻¹`.
    pub fn covariance(&self, x: &DMatrix<f64>) -> Result<SymmetricMatrix> {
        Ok(CholeskyFactor::new(&glm_precision(x, &self.gamma_tilde)?)?.inverse())
    }

    /// `(m̃_n, ṽ_n) = (x_nᵀ m, x_nᵀ V x_n)`.
    pub fn marginals(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let prec = CholeskyFactor::new(&glm_precision(x, &self.gamma_tilde)?)?;
        let t = prec.solve_lower_mat(&x.transpose());
        let var = DVector::from_iterator(x.nrows(), t.column_iter().map(|c| c.norm_squared()));
        Ok((x * &self.m, var))
    }

    pub fn to_variational(&self, x: &DMatrix<f64>) -> Result<GaussianVariational> {
        GaussianVariational::full(self.m.clone(), self.covariance(x)?)
    }
}

fn glm_precision(x: &DMatrix<f64>, w: &[f64]) -> Result<SymmetricMatrix> {
    check_dim(x.nrows(), w.len())?;
    let mut xw = x.clone();
    for (mut row, s) in xw.row_iter_mut().zip(w) {
        row *= *s;
    }
    let d = x.ncols();
    SymmetricMatrix::from_upper(x.transpose() * xw + DMatrix::identity(d, d))
}

/// One GLM step: `m ← m − (1 − r)(I + Xᵀ W X)⁻¹ (m + Xᵀ a)`, `γ̃` as in the GP step.
pub fn pg_svi_glm_step(
    state: &mut GlmSolverState,
    x: &DMatrix<f64>,
    a: &DVector<f64>,
    g: &DVector<f64>,
    beta: f64,
    mode: MeanUpdate,
) -> Result<StepInfo> {
    let n = x.nrows();
    check_dim(x.ncols(), state.m.len())?;
    check_dim(n, state.gamma_tilde.len())?;
    check_dim(n, a.len())?;
    check_dim(n, g.len())?;
    let r = mixing_weight(beta)?;
    let (prev, clamped) = update_gamma(&mut state.gamma_tilde, g, r, state.epsilon);
    state.clamp_events += clamped;
    let w: Vec<f64> = match mode {
        MeanUpdate::Approximate => state.gamma_tilde.clone(),
        MeanUpdate::Exact => prev.iter().map(|v| r * v).collect(),
    };
    let p = CholeskyFactor::new(&glm_precision(x, &w)?)?;
    let u = &state.m + x.transpose() * a;
    let m_new = &state.m - p.solve(&u) * (1.0 - r);
    let grad_norm_sq = step_norm(&state.m, &m_new, &prev, &state.gamma_tilde, beta);
    state.m = m_new;
    state.k += 1;
    Ok(StepInfo { grad_norm_sq, clamped })
}

/// Step-size sequence `β_k`.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Constant(f64),
    /// `β_k` for `k < len`; the last value repeats afterwards.
    General(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    /// `(α, L)` for validating `β_k ≤ 2α/L`.
    pub constraint: Option<(f64, f64)>,
}

impl StepSchedule {
    pub fn constant(beta: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant(beta),
            constraint: None,
        }
    }

    pub fn general(betas: Vec<f64>) -> Self {
        Self {
            kind: ScheduleKind::General(betas),
            constraint: None,
        }
    }

    pub fn with_constraint(mut self, alpha: f64, lipschitz: f64) -> Self {
        self.constraint = Some((alpha, lipschitz));
        self
    }

    pub fn beta(&self, k: usize) -> f64 {
        match &self.kind {
            ScheduleKind::Constant(b) => *b,
            ScheduleKind::General(v) => v[k.min(v.len() - 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let values: Vec<f64> = match &self.kind {
            ScheduleKind::Constant(b) => vec![*b],
            ScheduleKind::General(v) => {
                if v.is_empty() {
                    return Err(domain("step-size sequence is empty"));
                }
                v.clone()
            }
        };
        for b in &values {
            if !(*b > 0.0) || !b.is_finite() {
                return Err(domain(format!("step size {b} must be finite and > 0")));
            }
            if let Some((alpha, l)) = self.constraint {
                if *b > 2.0 * alpha / l {
                    return Err(domain(format!("step size {b} exceeds 2α/L = {}", 2.0 * alpha / l)));
                }
            }
        }
        Ok(())
    }

    /// First `t` step sizes.
    pub fn take(&self, t: usize) -> Vec<f64> {
        (0..t).map(|k| self.beta(k)).collect()
    }
}

/// Solver variant driven by [`run_solver`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Compact `(m, γ̃)` GP updates.
    PgSviCompact,
    /// Full-matrix GP updates.
    PgSviOracle,
    /// GLM updates in weight space.
    PgSviGlm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_passes: usize,
    /// Relative ELBO change per pass declared as convergence.
    pub elbo_delta_threshold: f64,
    /// Stop as diverged when the ELBO falls beyond the guard band for three
    /// consecutive passes.
    pub divergence_guard: bool,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            max_passes: 100,
            elbo_delta_threshold: 1e-5,
            divergence_guard: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub schedule: StepSchedule,
    pub minibatch: usize,
    pub sampling: Sampling,
    pub gradient: GradientMode,
    pub mean_update: MeanUpdate,
    pub epsilon: f64,
    pub stop: StopRule,
    pub seed: u64,
    /// Record wall-clock time; off produces byte-identical traces.
    pub record_timing: bool,
}

impl SolverConfig {
    /// Full-batch deterministic PG with exact mean updates.
    pub fn full_batch(method: Method, beta: f64, n: usize) -> Self {
        Self {
            method,
            schedule: StepSchedule::constant(beta),
            minibatch: n,
            sampling: Sampling::WithoutReplacement,
            gradient: GradientMode::Quadrature,
            mean_update: MeanUpdate::Exact,
            epsilon: DEFAULT_EPSILON,
            stop: StopRule::default(),
            seed: 0,
            record_timing: false,
        }
    }

    /// Stochastic PG-SVI with approximate mean updates.
    pub fn stochastic(beta: f64, minibatch: usize, gradient: GradientMode, seed: u64) -> Self {
        Self {
            method: Method::PgSviCompact,
            schedule: StepSchedule::constant(beta),
            minibatch,
            sampling: Sampling::WithReplacement,
            gradient,
            mean_update: MeanUpdate::Approximate,
            epsilon: DEFAULT_EPSILON,
            stop: StopRule::default(),
            seed,
            record_timing: false,
        }
    }
}

/// One row per pass (row 0 is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub pass: usize,
    pub iteration: usize,
    pub elbo: f64,
    pub test_logloss: Option<f64>,
    pub grad_norm_sq: f64,
    pub beta: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub grad_norm_sq: f64,
    pub beta: f64,
    pub minibatch: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    pub iterations: Vec<IterationRecord>,
    pub clamp_events: usize,
    pub status: RunStatus,
    pub passes_to_converge: Option<usize>,
}

impl SolverTrace {
    fn new() -> Self {
        Self {
            rows: Vec::new(),
            iterations: Vec::new(),
            clamp_events: 0,
            status: RunStatus::BudgetExhausted,
            passes_to_converge: None,
        }
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn diverged(&self) -> bool {
        self.status == RunStatus::Diverged
    }

    pub fn final_elbo(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.elbo)
    }
}

/// First pass `p ≥ 1` whose relative ELBO change falls below `threshold`.
pub fn first_converged_pass(elbos: &[f64], threshold: f64) -> Option<usize> {
    (1..elbos.len()).find(|&p| relative_change(elbos[p - 1], elbos[p]) < threshold)
}

pub fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

/// Guard band: the ELBO falls by more than `max(10 σ, 1e-9 |ELBO|)` for three
/// consecutive passes. `σ` is the standard deviation of the (up to five)
/// per-pass changes before the first drop of the streak.
pub fn divergence_detected(elbos: &[f64]) -> bool {
    if elbos.iter().any(|e| !e.is_finite()) {
        return true;
    }
    let mut streak = 0;
    let mut band = 0.0;
    for p in 1..elbos.len() {
        if streak == 0 {
            let lo = p.saturating_sub(6);
            let diffs: Vec<f64> = (lo + 1..p).map(|i| elbos[i] - elbos[i - 1]).collect();
            let sd = if diffs.len() >= 2 {
                let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
                (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            band = (10.0 * sd).max(1e-9 * elbos[p - 1].abs());
        }
        if elbos[p - 1] - elbos[p] > band {
            streak += 1;
            if streak >= 3 {
                return true;
            }
        } else {
            streak = 0;
        }
    }
    false
}

/// Outcome of a run: the trace and the final `q`.
#[derive(Debug, Clone)]
pub struct SolverRun {
    pub trace: SolverTrace,
    pub q: GaussianVariational,
}

/// Evaluates a held-out metric for the current `q`.
pub type Evaluator<'a> = &'a dyn Fn(&GaussianVariational) -> Result<f64>;

enum SolverState {
    Compact(GpSolverState),
    Oracle { m: DVector<f64>, v: SymmetricMatrix },
    Glm(GlmSolverState),
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NotPositiveDefinite { .. } | Error::NonFinite(_))
}

struct Runner<'a> {
    model: &'a ModelSplit,
    cfg: &'a SolverConfig,
    state: SolverState,
    clamps: usize,
}

impl<'a> Runner<'a> {
    fn new(model: &'a ModelSplit, cfg: &'a SolverConfig) -> Result<Self> {
        let n = model.num_examples();
        let state = match (cfg.method, &model.prior) {
            (Method::PgSviCompact, Prior::Gp(_)) => SolverState::Compact(GpSolverState::new(n, cfg.epsilon)?),
            (Method::PgSviOracle, Prior::Gp(prior)) => {
                // V₀⁻¹ = K⁻¹ + ε I, matching the compact initialization.
                let f = DiagPrecisionFactor::new(prior.kernel(), &vec![cfg.epsilon; n])?;
                SolverState::Oracle {
                    m: DVector::zeros(n),
                    v: f.covariance(prior.kernel()),
                }
            }
            (Method::PgSviGlm, Prior::Glm(x)) => SolverState::Glm(GlmSolverState::new(x.ncols(), n, cfg.epsilon)?),
            (method, _) => {
                return Err(domain(format!("method {method:?} does not match model prior")));
            }
        };
        Ok(Self {
            model,
            cfg,
            state,
            clamps: 0,
        })
    }

    fn q(&self) -> Result<GaussianVariational> {
        match (&self.state, &self.model.prior) {
            (SolverState::Compact(s), Prior::Gp(p)) => s.to_variational(p),
            (SolverState::Oracle { m, v }, _) => GaussianVariational::full(m.clone(), v.clone()),
            (SolverState::Glm(s), Prior::Glm(x)) => s.to_variational(x),
            _ => unreachable!("state matches prior by construction"),
        }
    }

    fn finite(&self) -> bool {
        match &self.state {
            SolverState::Compact(s) => s.m.iter().chain(&s.gamma_tilde).all(|v| v.is_finite()),
            SolverState::Oracle { m, v } => m.iter().all(|x| x.is_finite()) && v.is_finite(),
            SolverState::Glm(s) => s.m.iter().chain(&s.gamma_tilde).all(|v| v.is_finite()),
        }
    }

    fn marginal(&mut self, i: usize) -> Result<(f64, f64)> {
        match (&mut self.state, &self.model.prior) {
            (SolverState::Compact(s), Prior::Gp(p)) => {
                let v = s.marginal_variance(p, i)?;
                Ok((s.m[i], v))
            }
            (SolverState::Oracle { m, v }, _) => Ok((m[i], v.get(i, i))),
            (SolverState::Glm(s), Prior::Glm(x)) => {
                let prec = CholeskyFactor::new(&glm_precision(x, &s.gamma_tilde)?)?;
                let xi = x.row(i).transpose();
                let t = prec.solve_lower(&xi);
                Ok((xi.dot(&s.m), t.norm_squared()))
            }
            _ => unreachable!("state matches prior by construction"),
        }
    }

    fn iteration(&mut self, iter: usize) -> Result<IterationRecord> {
        let n = self.model.num_examples();
        let mb = self.cfg.minibatch;
        let seed = mix(self.cfg.seed, iter as u64, 0);
        let batch = select_minibatch(n, mb, self.cfg.sampling, seed)?;
        let scale = n as f64 / mb as f64;
        let mut a = DVector::zeros(n);
        let mut g = DVector::zeros(n);
        let mut marg_cache: Vec<Option<(f64, f64)>> = vec![None; n];
        for (pos, &i) in batch.iter().enumerate() {
            let (mi, vi) = match marg_cache[i] {
                Some(x) => x,
                None => {
                    let x = self.marginal(i)?;
                    marg_cache[i] = Some(x);
                    x
                }
            };
            let eg = example_gradient(self.model, i, mi, vi, self.cfg.gradient, example_seed(seed, pos))?;
            a[i] += scale * eg.d_m;
            g[i] += 2.0 * scale * eg.d_v;
        }
        let beta = self.cfg.schedule.beta(iter);
        let mode = self.cfg.mean_update;
        let info = match (&mut self.state, &self.model.prior) {
            (SolverState::Compact(s), Prior::Gp(p)) => pg_svi_gp_step_batch(s, p, &a, &g, beta, mode)?,
            (SolverState::Oracle { m, v }, Prior::Gp(p)) => {
                let (m_new, v_new) = full_oracle_step_batch(m, v, p.kernel(), &a, &g, beta)?;
                let dm = (&*m - &m_new).norm_squared();
                let dp = (CholeskyFactor::new(v)?.inverse().into_inner()
                    - CholeskyFactor::new(&v_new)?.inverse().into_inner())
                .diagonal()
                .norm_squared();
                *m = m_new;
                *v = v_new;
                StepInfo {
                    grad_norm_sq: (dm + dp) / (beta * beta),
                    clamped: 0,
                }
            }
            (SolverState::Glm(s), Prior::Glm(x)) => pg_svi_glm_step(s, x, &a, &g, beta, mode)?,
            _ => unreachable!("state matches prior by construction"),
        };
        self.clamps += info.clamped;
        Ok(IterationRecord {
            grad_norm_sq: info.grad_norm_sq,
            beta,
            minibatch: batch,
        })
    }
}

/// Runs PG-SVI until the stop rule fires.
///
/// The ELBO is evaluated by quadrature once per pass; a pass is
/// `⌈N / M⌉` iterations. Non-finite state or a lost factorization ends the
/// run as diverged.
pub fn run_solver(model: &ModelSplit, cfg: &SolverConfig, evaluator: Option<Evaluator<'_>>) -> Result<SolverRun> {
    cfg.schedule.validate()?;
    check_batch(model, cfg.minibatch, cfg.gradient)?;
    let mut runner = Runner::new(model, cfg)?;
    let passes = PassConfig {
        stop: cfg.stop,
        per_pass: model.num_examples().div_ceil(cfg.minibatch),
        seed: cfg.seed,
        record_timing: cfg.record_timing,
        initial_step: cfg.schedule.beta(0),
    };
    drive(model, &mut runner, &passes, evaluator)
}

pub(crate) fn check_batch(model: &ModelSplit, minibatch: usize, gradient: GradientMode) -> Result<()> {
    let n = model.num_examples();
    if minibatch == 0 || minibatch > n {
        return Err(domain(format!("mini-batch size {minibatch} must lie in [1, {n}]")));
    }
    if let GradientMode::MonteCarlo { samples } = gradient {
        if samples < 2 {
            return Err(domain("Monte Carlo gradients need at least 2 samples"));
        }
    }
    Ok(())
}

/// An optimizer advanced one iteration at a time by [`drive`].
pub(crate) trait Iterate {
    fn step(&mut self, iter: usize) -> Result<IterationRecord>;
    fn q(&self) -> Result<GaussianVariational>;
    fn finite(&self) -> bool;
    fn clamps(&self) -> usize {
        0
    }
}

impl Iterate for Runner<'_> {
    fn step(&mut self, iter: usize) -> Result<IterationRecord> {
        self.iteration(iter)
    }

    fn q(&self) -> Result<GaussianVariational> {
        Runner::q(self)
    }

    fn finite(&self) -> bool {
        Runner::finite(self)
    }

    fn clamps(&self) -> usize {
        self.clamps
    }
}

pub(crate) struct PassConfig {
    pub stop: StopRule,
    pub per_pass: usize,
    pub seed: u64,
    pub record_timing: bool,
    /// Step size reported in the initial row.
    pub initial_step: f64,
}

/// Pass loop shared by PG-SVI and the baselines.
pub(crate) fn drive(
    model: &ModelSplit,
    it: &mut dyn Iterate,
    cfg: &PassConfig,
    evaluator: Option<Evaluator<'_>>,
) -> Result<SolverRun> {
    let start = Instant::now();
    let wall = |t: &Instant| if cfg.record_timing { t.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let mut trace = SolverTrace::new();

    let q0 = it.q()?;
    let e0 = elbo(model, &q0)?;
    trace.rows.push(TraceRow {
        pass: 0,
        iteration: 0,
        elbo: e0,
        test_logloss: evaluator.map(|f| f(&q0)).transpose()?,
        grad_norm_sq: 0.0,
        beta: cfg.initial_step,
        wall_ms: wall(&start),
        seed: cfg.seed,
    });
    let mut elbos = vec![e0];
    let mut iter = 0usize;
    let mut q_final = q0;

    'passes: for pass in 1..=cfg.stop.max_passes {
        let mut last = (0.0, cfg.initial_step);
        for _ in 0..cfg.per_pass {
            match it.step(iter) {
                Ok(rec) => {
                    last = (rec.grad_norm_sq, rec.beta);
                    trace.iterations.push(rec);
                }
                Err(e) if is_numerical(&e) => {
                    warn!("iteration {iter}: {e}; marking run as diverged");
                    trace.status = RunStatus::Diverged;
                    break 'passes;
                }
                Err(e) => return Err(e),
            }
            iter += 1;
            if !it.finite() {
                trace.status = RunStatus::Diverged;
                break 'passes;
            }
        }
        let q = match it.q() {
            Ok(q) => q,
            Err(e) if is_numerical(&e) => {
                trace.status = RunStatus::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        let e = match elbo(model, &q) {
            Ok(e) => e,
            Err(Error::Domain(_) | Error::NotPositiveDefinite { .. } | Error::NonFinite(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        let test_logloss = if e.is_finite() {
            evaluator.map(|f| f(&q)).transpose()?
        } else {
            None
        };
        trace.rows.push(TraceRow {
            pass,
            iteration: iter,
            elbo: e,
            test_logloss,
            grad_norm_sq: last.0,
            beta: last.1,
            wall_ms: wall(&start),
            seed: cfg.seed,
        });
        elbos.push(e);
        q_final = q;
        if !e.is_finite() || (cfg.stop.divergence_guard && divergence_detected(&elbos)) {
            trace.status = RunStatus::Diverged;
            break;
        }
        if relative_change(elbos[pass - 1], e) < cfg.stop.elbo_delta_threshold {
            trace.status = RunStatus::Converged;
            trace.passes_to_converge = Some(pass);
            break;
        }
    }
    trace.clamp_events = it.clamps();
    Ok(SolverRun { trace, q: q_final })
}

/// Which bound [`convergence_bound`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// `2 L C₀ / (α² t)`.
    Prop1,
    /// `C₀ / Σ (α β_k − L β_k² / 2)`.
    Prop2,
    /// `2 L C₀ / (α*² t) + c σ² / (M α*)`, `α* = α − 1/(2c)`.
    Prop3,
    /// `(C₀ + (c σ² / 2) Σ β_k / M) / Σ (α* β_k − L β_k² / 2)`.
    Thm1,
}

#[derive(Debug, Clone)]
pub struct BoundInputs {
    pub lipschitz: f64,
    pub alpha: f64,
    pub c0: f64,
    pub t: usize,
    /// Required for `Prop2` and `Thm1`.
    pub schedule: Option<StepSchedule>,
    pub sigma2: f64,
    pub minibatch: usize,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bound {
    pub value: f64,
    /// Distribution of the returned iterate `R` over `0..t` (`Thm1` only).
    pub pmf: Option<Vec<f64>>,
}

/// Right-hand sides of the convergence bounds.
pub fn convergence_bound(kind: BoundKind, p: &BoundInputs) -> Result<Bound> {
    let positive = [("L", p.lipschitz), ("alpha", p.alpha), ("C0", p.c0)];
    for (name, v) in positive {
        if !(v > 0.0) || !v.is_finite() {
            return Err(domain(format!("{name} = {v} must be finite and > 0")));
        }
    }
    if p.t == 0 {
        return Err(domain("t must be >= 1"));
    }
    let (l, a, c0, t) = (p.lipschitz, p.alpha, p.c0, p.t as f64);
    let alpha_star = || -> Result<f64> {
        if !(p.c > 1.0 / (2.0 * a)) {
            return Err(domain(format!("c = {} must exceed 1/(2α) = {}", p.c, 1.0 / (2.0 * a))));
        }
        if p.minibatch == 0 {
            return Err(domain("mini-batch size must be >= 1"));
        }
        Ok(a - 1.0 / (2.0 * p.c))
    };
    let betas = || -> Result<Vec<f64>> {
        let s = p.schedule.as_ref().ok_or_else(|| domain("this bound needs a step-size schedule"))?;
        s.validate()?;
        Ok(s.take(p.t))
    };
    match kind {
        BoundKind::Prop1 => Ok(Bound {
            value: 2.0 * l * c0 / (a * a * t),
            pmf: None,
        }),
        BoundKind::Prop2 => {
            let denom: f64 = betas()?.iter().map(|b| a * b - l * b * b / 2.0).sum();
            if !(denom > 0.0) {
                return Err(domain("Σ(αβ_k − Lβ_k²/2) must be > 0"));
            }
            Ok(Bound {
                value: c0 / denom,
                pmf: None,
            })
        }
        BoundKind::Prop3 => {
            let s = alpha_star()?;
            Ok(Bound {
                value: 2.0 * l * c0 / (s * s * t) + p.c * p.sigma2 / (p.minibatch as f64 * s),
                pmf: None,
            })
        }
        BoundKind::Thm1 => {
            let s = alpha_star()?;
            let b = betas()?;
            let weights: Vec<f64> = b.iter().map(|b| s * b - l * b * b / 2.0).collect();
            let denom: f64 = weights.iter().sum();
            if !(denom > 0.0) || weights.iter().any(|w| *w < 0.0) {
                return Err(domain("α*β_k − Lβ_k²/2 must be >= 0 with a positive sum"));
            }
            let sum_b: f64 = b.iter().sum();
            let value = (c0 + p.c * p.sigma2 / 2.0 * sum_b / p.minibatch as f64) / denom;
            Ok(Bound {
                value,
                pmf: Some(weights.iter().map(|w| w / denom).collect()),
            })
        }
    }
}

/// Reads the `γ̃` of a compact `q`.
pub fn gamma_tilde_of(q: &GaussianVariational) -> Option<&[f64]> {
    match &q.cov {
        Covariance::GpCompact { gamma_tilde, .. } => Some(gamma_tilde),
        _ => None,
    }
}
