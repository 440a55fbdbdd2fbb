//! Score-function Monte Carlo gradients and mini-batching.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, Error, Result};
use crate::linalg::CholeskyFactor;
use crate::models::{GaussianVariational, ModelSplit};
use crate::rng::{mix, stream};

/// A stochastic gradient together with its sampling diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Sample mean of the integrand.
    pub value: f64,
    /// Unbiased sample variance of the integrand.
    pub value_variance: f64,
    pub gradient: Vec<f64>,
    /// Unbiased per-coordinate variance of the per-sample gradient terms.
    pub sample_variance: Vec<f64>,
    pub samples: usize,
    pub minibatch: Vec<usize>,
    pub seed: u64,
}

/// Welford accumulator over vectors.
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let nf = self.n as f64;
        for ((mu, m2), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *mu;
            *mu += d / nf;
            *m2 += d * (v - *mu);
        }
    }

    fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.m2.len()];
        }
        self.m2.iter().map(|m| m / (self.n - 1) as f64).collect()
    }
}

const SAMPLE_TAG: u64 = 0x5EED_5A3F;

/// `ĝ = (1/S) Σ f(z_s) ∇_λ log q(z_s | λ)` for a full Gaussian `q`.
///
/// Coordinates are `(m, vec V)` with `V` flattened column-major.
pub fn score_function_estimate(
    f: &dyn Fn(&DVector<f64>) -> f64,
    q: &GaussianVariational,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    if samples < 2 {
        return Err(domain("score-function estimate needs at least 2 samples"));
    }
    score_function_draws(f, q, samples, seed)
}

/// As [`score_function_estimate`] but accepts a single sample (variance 0).
pub(crate) fn score_function_draws(
    f: &dyn Fn(&DVector<f64>) -> f64,
    q: &GaussianVariational,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    let d = q.dim();
    let v = q.covariance()?;
    let chol = CholeskyFactor::new(&v)?;
    let v_inv = chol.inverse();
    let mut moments = Moments::new(1 + d + d * d);
    let mut term = vec![0.0; 1 + d + d * d];
    for s in 0..samples {
        let mut rng = stream(seed, s as u64, SAMPLE_TAG);
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &q.mean + chol.lower() * &eps;
        let fz = f(&z);
        let u = v_inv.mul_vec(&(&z - &q.mean));
        term[0] = fz;
        for i in 0..d {
            term[1 + i] = fz * u[i];
        }
        for j in 0..d {
            for i in 0..d {
                term[1 + d + j * d + i] = fz * 0.5 * (u[i] * u[j] - v_inv.get(i, j));
            }
        }
        moments.push(&term);
    }
    let var = moments.variance();
    Ok(GradientEstimate {
        value: moments.mean[0],
        value_variance: var[0],
        gradient: moments.mean[1..].to_vec(),
        sample_variance: var[1..].to_vec(),
        samples,
        minibatch: Vec::new(),
        seed,
    })
}

fn marginal_score_inner(f: &dyn Fn(f64) -> f64, m: f64, v: f64, samples: usize, seed: u64) -> GradientEstimate {
    let sd = v.sqrt();
    let mut moments = Moments::new(3);
    for s in 0..samples {
        let mut rng = stream(seed, s as u64, SAMPLE_TAG);
        let e: f64 = rng.sample(StandardNormal);
        let z = m + sd * e;
        let fz = f(z);
        let d = z - m;
        moments.push(&[fz, fz * d / v, fz * 0.5 * (d * d / (v * v) - 1.0 / v)]);
    }
    let var = moments.variance();
    GradientEstimate {
        value: moments.mean[0],
        value_variance: var[0],
        gradient: moments.mean[1..].to_vec(),
        sample_variance: var[1..].to_vec(),
        samples,
        minibatch: Vec::new(),
        seed,
    }
}

/// Score-function estimate for a 1-D marginal `N(m, v)`; gradient is `(∂/∂m, ∂/∂v)`.
pub fn score_function_marginal(
    f: &dyn Fn(f64) -> f64,
    m: f64,
    v: f64,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    if samples < 2 {
        return Err(domain("score-function estimate needs at least 2 samples"));
    }
    if !v.is_finite() || !m.is_finite() {
        return Err(Error::NonFinite(format!("marginal (m, v) = ({m}, {v})")));
    }
    if !(v > 0.0) {
        return Err(domain(format!("marginal variance {v} must be > 0")));
    }
    Ok(marginal_score_inner(f, m, v, samples, seed))
}

/// How per-example gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Deterministic quadrature derivatives.
    Quadrature,
    /// Score-function Monte Carlo with this many samples per example.
    MonteCarlo { samples: usize },
}

/// Mini-batch sampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    WithReplacement,
    WithoutReplacement,
}

/// Draws `m` indices from `0..n`.
pub fn select_minibatch(n: usize, m: usize, sampling: Sampling, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(domain(format!("mini-batch size {m} must lie in [1, {n}]")));
    }
    let mut rng = stream(seed, u64::MAX, 0xB47C);
    match sampling {
        Sampling::WithReplacement => Ok((0..m).map(|_| rng.random_range(0..n)).collect()),
        Sampling::WithoutReplacement => {
            if m == n {
                return Ok((0..n).collect());
            }
            Ok(rand::seq::index::sample(&mut rng, n, m).into_vec())
        }
    }
}

/// Per-example gradient `(∂f_n/∂m_n, ∂f_n/∂v_n)` and the per-sample variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleGradient {
    pub d_m: f64,
    pub d_v: f64,
    pub var_m: f64,
    pub var_v: f64,
}

pub fn example_gradient(
    model: &ModelSplit,
    n: usize,
    m_n: f64,
    v_n: f64,
    mode: GradientMode,
    seed: u64,
) -> Result<ExampleGradient> {
    match mode {
        GradientMode::Quadrature => {
            let t = model.difficult_value_and_grads(n, m_n, v_n)?;
            Ok(ExampleGradient {
                d_m: t.d_m,
                d_v: t.d_v,
                var_m: 0.0,
                var_v: 0.0,
            })
        }
        GradientMode::MonteCarlo { samples } => {
            if n >= model.num_examples() {
                return Err(domain(format!("example index {n} out of range")));
            }
            let y = model.targets[n];
            let lik = model.likelihood;
            let est = score_function_marginal(&|z| lik.neg_log_lik(y, z), m_n, v_n, samples, seed)?;
            Ok(ExampleGradient {
                d_m: est.gradient[0],
                d_v: est.gradient[1],
                var_m: est.sample_variance[0],
                var_v: est.sample_variance[1],
            })
        }
    }
}

/// Seed for the `i`-th draw of a mini-batch.
pub fn example_seed(seed: u64, position: usize) -> u64 {
    mix(seed, position as u64, 0xE7A3)
}

/// `∇̂f = (N/M) Σ_i ĝ_{n_i}` over the marginal coordinates `(m̃, ṽ)`.
///
/// The gradient has length `2N`: the mean block followed by the variance
/// block. Repeated indices accumulate. `sample_variance` is the sum over
/// draws of `(N/M)²` times the per-sample variance of each draw.
pub fn minibatch_gradient(
    model: &ModelSplit,
    q: &GaussianVariational,
    m: usize,
    mode: GradientMode,
    sampling: Sampling,
    seed: u64,
) -> Result<GradientEstimate> {
    let n = model.num_examples();
    let batch = select_minibatch(n, m, sampling, seed)?;
    let marg = model.marginals(q)?;
    let scale = n as f64 / m as f64;
    let mut gradient = vec![0.0; 2 * n];
    let mut variance = vec![0.0; 2 * n];
    for (pos, &i) in batch.iter().enumerate() {
        let g = example_gradient(model, i, marg.mean[i], marg.var[i], mode, example_seed(seed, pos))?;
        gradient[i] += scale * g.d_m;
        gradient[n + i] += scale * g.d_v;
        variance[i] += scale * scale * g.var_m;
        variance[n + i] += scale * scale * g.var_v;
    }
    Ok(GradientEstimate {
        value: f64::NAN,
        value_variance: 0.0,
        gradient,
        sample_variance: variance,
        samples: match mode {
            GradientMode::Quadrature => 0,
            GradientMode::MonteCarlo { samples } => samples,
        },
        minibatch: batch,
        seed,
    })
}
