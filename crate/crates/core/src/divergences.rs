//! Divergence functions over Gaussian parameters and the empirical A6
//! constant.
//!
//! A Gaussian `λ = (m, V)` of dimension `D` is flattened as
//! `[m_1..m_D, vec(V)]` with `vec` column-major, `D + D²` entries in total.
//! All inner products and norms are taken in these coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, domain, Error, Result};
use crate::linalg::{CholeskyFactor, SymmetricMatrix};

/// Kind of divergence `D(λ ‖ λ′)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceKind {
    /// `½‖λ − λ′‖²`.
    SquaredEuclidean,
    /// `KL(q_λ ‖ q_λ′)`.
    KlForward,
    /// `KL(q_λ′ ‖ q_λ)`, the Bregman divergence of the log-partition function.
    KlReverse,
    /// `KL(q_λ ‖ q_λ′) + KL(q_λ′ ‖ q_λ)`.
    SymmetricKl,
}

/// A divergence over the flattened parameters of a `dim`-dimensional Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    pub dim: usize,
}

/// Anything that evaluates `D(λ ‖ λ′)` and `∇_λ D(λ ‖ λ′)`.
pub trait Divergence {
    fn evaluate(&self, lambda: &[f64], lambda_prime: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Flattened Gaussian parameters.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: SymmetricMatrix,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: SymmetricMatrix) -> Result<Self> {
        check_dim(mean.len(), cov.order())?;
        Ok(Self { mean, cov })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.mean.as_slice().to_vec();
        out.extend_from_slice(self.cov.as_matrix().as_slice());
        out
    }

    pub fn unflatten(dim: usize, lambda: &[f64]) -> Result<Self> {
        check_dim(dim + dim * dim, lambda.len())?;
        let mean = DVector::from_column_slice(&lambda[..dim]);
        let v = DMatrix::from_column_slice(dim, dim, &lambda[dim..]);
        for j in 0..dim {
            for i in 0..j {
                if v[(i, j)] != v[(j, i)] {
                    return Err(domain("covariance block is not symmetric"));
                }
            }
        }
        Ok(Self {
            mean,
            cov: SymmetricMatrix::from_upper(v)?,
        })
    }
}

/// Cached pieces of one Gaussian.
struct Prepared {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    inv: DMatrix<f64>,
    log_det: f64,
}

fn prepare(p: &GaussianParams) -> Result<Prepared> {
    let chol = CholeskyFactor::new(&p.cov).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, value } => {
            domain(format!("covariance is not positive definite (pivot {pivot} = {value:e})"))
        }
        other => other,
    })?;
    Ok(Prepared {
        mean: p.mean.clone(),
        cov: p.cov.as_matrix().clone(),
        inv: chol.inverse().into_inner(),
        log_det: chol.log_det(),
    })
}

fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// `KL(a ‖ b)`.
fn kl(a: &Prepared, b: &Prepared) -> f64 {
    let d = &a.mean - &b.mean;
    let quad = (&b.inv * &d).dot(&d);
    0.5 * (b.log_det - a.log_det + trace_prod(&b.inv, &a.cov) + quad - a.mean.len() as f64)
}

fn pack(gm: DVector<f64>, gv: DMatrix<f64>) -> Vec<f64> {
    let mut out = gm.as_slice().to_vec();
    out.extend_from_slice(gv.as_slice());
    out
}

/// `∇_λ KL(q_λ ‖ q_λ′)`.
fn grad_forward(a: &Prepared, b: &Prepared) -> Vec<f64> {
    let gm = &b.inv * (&a.mean - &b.mean);
    let gv = (&b.inv - &a.inv) * 0.5;
    pack(gm, gv)
}

/// `∇_λ KL(q_λ′ ‖ q_λ)`.
fn grad_reverse(a: &Prepared, b: &Prepared) -> Vec<f64> {
    let d = &a.mean - &b.mean;
    let u = &a.inv * &d;
    let gm = u.clone();
    let gv = (&a.inv - &a.inv * &b.cov * &a.inv - &u * u.transpose()) * 0.5;
    pack(gm, gv)
}

impl DivergenceSpec {
    pub fn new(kind: DivergenceKind, dim: usize) -> Self {
        Self { kind, dim }
    }

    /// Evaluates on structured parameters.
    pub fn divergence(&self, a: &GaussianParams, b: &GaussianParams) -> Result<(f64, Vec<f64>)> {
        self.evaluate(&a.flatten(), &b.flatten())
    }
}

impl Divergence for DivergenceSpec {
    fn evaluate(&self, lambda: &[f64], lambda_prime: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(lambda.len(), lambda_prime.len())?;
        if let DivergenceKind::SquaredEuclidean = self.kind {
            check_dim(self.dim + self.dim * self.dim, lambda.len())?;
            let diff = sub(lambda, lambda_prime);
            return Ok((0.5 * dot(&diff, &diff), diff));
        }
        let a = prepare(&GaussianParams::unflatten(self.dim, lambda)?)?;
        let b = prepare(&GaussianParams::unflatten(self.dim, lambda_prime)?)?;
        Ok(match self.kind {
            DivergenceKind::SquaredEuclidean => unreachable!(),
            DivergenceKind::KlForward => (kl(&a, &b), grad_forward(&a, &b)),
            DivergenceKind::KlReverse => (kl(&b, &a), grad_reverse(&a, &b)),
            DivergenceKind::SymmetricKl => {
                let d = &a.mean - &b.mean;
                let quad = ((&a.inv + &b.inv) * &d).dot(&d);
                let value = 0.5 * (trace_prod(&a.inv, &b.cov) + trace_prod(&b.inv, &a.cov) + quad)
                    - self.dim as f64;
                let g: Vec<f64> = grad_forward(&a, &b)
                    .into_iter()
                    .zip(grad_reverse(&a, &b))
                    .map(|(x, y)| x + y)
                    .collect();
                (value, g)
            }
        })
    }
}

/// Convex potential `A` defining a Bregman divergence.
pub trait Potential {
    fn value(&self, lambda: &[f64]) -> f64;
    fn gradient(&self, lambda: &[f64]) -> Vec<f64>;
}

/// `A(λ) = ½‖λ‖²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticPotential;

impl Potential for QuadraticPotential {
    fn value(&self, lambda: &[f64]) -> f64 {
        0.5 * dot(lambda, lambda)
    }

    fn gradient(&self, lambda: &[f64]) -> Vec<f64> {
        lambda.to_vec()
    }
}

/// `D_A(λ ‖ λ′) = A(λ) − A(λ′) − ∇A(λ′)ᵀ(λ − λ′)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bregman<P>(pub P);

impl<P: Potential> Divergence for Bregman<P> {
    fn evaluate(&self, lambda: &[f64], lambda_prime: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(lambda.len(), lambda_prime.len())?;
        let diff = sub(lambda, lambda_prime);
        let gp = self.0.gradient(lambda_prime);
        let value = self.0.value(lambda) - self.0.value(lambda_prime) - dot(&gp, &diff);
        let grad = sub(&self.0.gradient(lambda), &gp);
        Ok((value, grad))
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|SymKL − (KlForward + KlReverse)|`.
pub fn symmetric_kl_decomposition_check(a: &GaussianParams, b: &GaussianParams) -> Result<f64> {
    let dim = a.mean.len();
    let sym = DivergenceSpec::new(DivergenceKind::SymmetricKl, dim).divergence(a, b)?.0;
    let fwd = DivergenceSpec::new(DivergenceKind::KlForward, dim).divergence(a, b)?.0;
    let rev = DivergenceSpec::new(DivergenceKind::KlReverse, dim).divergence(a, b)?.0;
    Ok((sym - (fwd + rev)).abs())
}

/// `min (λ − λ′)ᵀ ∇_λ D(λ‖λ′) / ‖λ − λ′‖²` over the pairs with `λ ≠ λ′`.
///
/// This is an empirical probe: it is the largest constant consistent with
/// the observed pairs, not a certified bound.
pub fn estimate_alpha<D: Divergence + ?Sized>(div: &D, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut best: Option<f64> = None;
    for (a, b) in pairs {
        let diff = sub(a, b);
        let denom = dot(&diff, &diff);
        if denom == 0.0 {
            continue;
        }
        let (_, g) = div.evaluate(a, b)?;
        let ratio = dot(&diff, &g) / denom;
        best = Some(best.map_or(ratio, |x: f64| x.min(ratio)));
    }
    best.ok_or(Error::UndefinedAlpha)
}
