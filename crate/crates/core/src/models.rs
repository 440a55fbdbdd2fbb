//! Model plug-ins that split the negative ELBO into `f + h`.
//!
//! `f` is a sum of per-example expected negative log-likelihoods that only
//! depend on the marginal `(m_n, v_n)` of the linear predictor; `h` is the
//! Gaussian KL divergence from `q` to the prior.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, domain, Error, Result};
use crate::estimators::score_function_draws;
use crate::linalg::{se_cross_kernel, CholeskyFactor, DiagPrecisionFactor, KernelConfig, SymmetricMatrix};
use crate::quadrature::GaussHermite;

/// Zero-mean GP prior with a cached factorization of its kernel.
#[derive(Debug, Clone)]
pub struct GpPrior {
    kernel: SymmetricMatrix,
    chol: CholeskyFactor,
}

impl GpPrior {
    pub fn new(kernel: SymmetricMatrix) -> Result<Self> {
        let chol = CholeskyFactor::new(&kernel)?;
        Ok(Self { kernel, chol })
    }

    pub fn kernel(&self) -> &SymmetricMatrix {
        &self.kernel
    }

    pub fn chol(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn order(&self) -> usize {
        self.kernel.order()
    }
}

/// Covariance representation of a Gaussian `q`.
#[derive(Debug, Clone)]
pub enum Covariance {
    Full(SymmetricMatrix),
    /// `V = L Lᵀ` held by its lower factor.
    Cholesky(CholeskyFactor),
    /// `V⁻¹ = K⁻¹ + diag(γ̃)`; `V` is never stored.
    GpCompact {
        gamma_tilde: Vec<f64>,
        prior: Arc<GpPrior>,
    },
}

/// Gaussian variational distribution `N(m, V)`.
#[derive(Debug, Clone)]
pub struct GaussianVariational {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl GaussianVariational {
    pub fn full(mean: DVector<f64>, v: SymmetricMatrix) -> Result<Self> {
        check_dim(v.order(), mean.len())?;
        CholeskyFactor::new(&v)?;
        Ok(Self {
            mean,
            cov: Covariance::Full(v),
        })
    }

    /// `N(m, L Lᵀ)` for lower-triangular `L` with positive diagonal.
    pub fn from_cholesky(mean: DVector<f64>, lower: DMatrix<f64>) -> Result<Self> {
        check_dim(lower.nrows(), mean.len())?;
        Ok(Self {
            mean,
            cov: Covariance::Cholesky(CholeskyFactor::from_lower(lower)?),
        })
    }

    pub fn compact(mean: DVector<f64>, gamma_tilde: Vec<f64>, prior: Arc<GpPrior>) -> Result<Self> {
        check_dim(prior.order(), mean.len())?;
        check_dim(prior.order(), gamma_tilde.len())?;
        if let Some(i) = gamma_tilde.iter().position(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(domain(format!("gamma_tilde[{i}] = {} must be > 0", gamma_tilde[i])));
        }
        Ok(Self {
            mean,
            cov: Covariance::GpCompact { gamma_tilde, prior },
        })
    }

    /// Zero mean with `γ̃ = ε`, i.e. the prior up to `ε`.
    pub fn from_prior(prior: Arc<GpPrior>, epsilon: f64) -> Result<Self> {
        let n = prior.order();
        Self::compact(DVector::zeros(n), vec![epsilon; n], prior)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Factor of `V` in the `B` form (compact representation only).
    pub fn compact_factor(&self) -> Option<Result<DiagPrecisionFactor>> {
        match &self.cov {
            Covariance::GpCompact { gamma_tilde, prior } => {
                Some(DiagPrecisionFactor::new(prior.kernel(), gamma_tilde))
            }
            _ => None,
        }
    }

    /// Lower Cholesky factor of `V`.
    pub fn covariance_factor(&self) -> Result<CholeskyFactor> {
        match &self.cov {
            Covariance::Cholesky(f) => Ok(f.clone()),
            Covariance::Full(v) => CholeskyFactor::new(v),
            Covariance::GpCompact { .. } => CholeskyFactor::new(&self.covariance()?),
        }
    }

    /// `diag(V)`.
    pub fn marginal_variances(&self) -> Result<DVector<f64>> {
        match &self.cov {
            Covariance::Full(v) => Ok(v.diagonal()),
            Covariance::Cholesky(f) => Ok(DVector::from_iterator(
                self.dim(),
                f.lower().row_iter().map(|r| r.norm_squared()),
            )),
            Covariance::GpCompact { gamma_tilde, prior } => {
                Ok(DiagPrecisionFactor::new(prior.kernel(), gamma_tilde)?.marginal_variances(prior.kernel()))
            }
        }
    }

    /// Materializes `V`.
    pub fn covariance(&self) -> Result<SymmetricMatrix> {
        match &self.cov {
            Covariance::Full(v) => Ok(v.clone()),
            Covariance::Cholesky(f) => Ok(f.reconstruct()),
            Covariance::GpCompact { gamma_tilde, prior } => {
                Ok(DiagPrecisionFactor::new(prior.kernel(), gamma_tilde)?.covariance(prior.kernel()))
            }
        }
    }

    pub fn to_full(&self) -> Result<Self> {
        Ok(Self {
            mean: self.mean.clone(),
            cov: Covariance::Full(self.covariance()?),
        })
    }
}

/// Value and first derivatives of one difficult term `f_n(m_n, v_n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub d_m: f64,
    pub d_v: f64,
}

/// Observation model `p(y | z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    Gaussian { noise_var: f64 },
    /// Labels in `{−1, +1}`, `log p(y|z) = −log(1 + e^{−yz})`.
    BernoulliLogit,
    /// Nonnegative integer counts with rate `e^z`.
    Poisson,
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn ln_factorial(y: f64) -> f64 {
    let mut acc = 0.0;
    let mut k = 2.0;
    while k <= y {
        acc += f64::ln(k);
        k += 1.0;
    }
    acc
}

impl Likelihood {
    /// `−log p(y | z)`.
    pub fn neg_log_lik(&self, y: f64, z: f64) -> f64 {
        match *self {
            Likelihood::Gaussian { noise_var } => {
                0.5 * (2.0 * PI * noise_var).ln() + (y - z).powi(2) / (2.0 * noise_var)
            }
            Likelihood::BernoulliLogit => softplus(-y * z),
            Likelihood::Poisson => -y * z + z.exp() + ln_factorial(y),
        }
    }

    /// `f(m, v) = E_{N(z|m,v)}[−log p(y|z)]` with derivatives.
    ///
    /// The Bernoulli case differentiates the 64-node quadrature itself, so the
    /// derivatives are exact for the value that is returned.
    pub fn expected_nll(&self, y: f64, m: f64, v: f64) -> Result<TermValue> {
        if !v.is_finite() || !m.is_finite() {
            return Err(Error::NonFinite(format!("marginal (m, v) = ({m}, {v})")));
        }
        if !(v > 0.0) {
            return Err(domain(format!("marginal variance {v} must be > 0")));
        }
        match *self {
            Likelihood::Gaussian { noise_var } => Ok(TermValue {
                value: 0.5 * (2.0 * PI * noise_var).ln() + ((y - m).powi(2) + v) / (2.0 * noise_var),
                d_m: (m - y) / noise_var,
                d_v: 0.5 / noise_var,
            }),
            Likelihood::BernoulliLogit => {
                let gh = GaussHermite::standard();
                let s = (2.0 * v).sqrt();
                let (mut val, mut dm, mut dv) = (0.0, 0.0, 0.0);
                for (x, w) in gh.nodes.iter().zip(&gh.weights) {
                    let z = m + s * x;
                    let d = -y * sigmoid(-y * z);
                    val += w * softplus(-y * z);
                    dm += w * d;
                    dv += w * d * x;
                }
                let c = PI.sqrt();
                Ok(TermValue {
                    value: val / c,
                    d_m: dm / c,
                    d_v: dv / (s * c),
                })
            }
            Likelihood::Poisson => {
                let e = (m + 0.5 * v).exp();
                Ok(TermValue {
                    value: -y * m + e + ln_factorial(y),
                    d_m: -y + e,
                    d_v: 0.5 * e,
                })
            }
        }
    }

    /// `∫ p(y|z) N(z|m, v) dz`.
    pub fn predictive_prob(&self, y: f64, m: f64, v: f64) -> f64 {
        match *self {
            Likelihood::Gaussian { noise_var } => {
                let s2 = v + noise_var;
                (-(y - m).powi(2) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt()
            }
            Likelihood::BernoulliLogit => {
                GaussHermite::standard().expect(m, v.max(0.0), |z| sigmoid(y * z))
            }
            Likelihood::Poisson => {
                GaussHermite::standard().expect(m, v.max(0.0), |z| (-self.neg_log_lik(y, z)).exp())
            }
        }
    }

    /// Lipschitz constant of `∂f/∂m`, when one exists.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        match *self {
            Likelihood::Gaussian { noise_var } => Some(1.0 / noise_var),
            Likelihood::BernoulliLogit => Some(0.25),
            Likelihood::Poisson => None,
        }
    }

    fn validate_target(&self, y: f64) -> Result<()> {
        let ok = match self {
            Likelihood::Gaussian { .. } => y.is_finite(),
            Likelihood::BernoulliLogit => y == 1.0 || y == -1.0,
            Likelihood::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(domain(format!("target {y} is invalid for {self:?}")))
        }
    }
}

/// Prior over the latent variable.
#[derive(Debug, Clone)]
pub enum Prior {
    /// Latent function values with prior `N(0, K)`.
    Gp(Arc<GpPrior>),
    /// Weights with prior `N(0, I)`; example `n` sees `x_nᵀ w`.
    Glm(Arc<DMatrix<f64>>),
}

/// Negative ELBO split into per-example difficult terms and a Gaussian KL.
#[derive(Debug, Clone)]
pub struct ModelSplit {
    pub name: String,
    pub likelihood: Likelihood,
    pub targets: Vec<f64>,
    pub prior: Prior,
}

/// Per-example marginals of the linear predictor.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl ModelSplit {
    pub fn new(name: impl Into<String>, likelihood: Likelihood, targets: Vec<f64>, prior: Prior) -> Result<Self> {
        if let Likelihood::Gaussian { noise_var } = likelihood {
            if !(noise_var > 0.0) {
                return Err(domain("noise variance must be > 0"));
            }
        }
        for y in &targets {
            likelihood.validate_target(*y)?;
        }
        let n = match &prior {
            Prior::Gp(p) => p.order(),
            Prior::Glm(x) => x.nrows(),
        };
        check_dim(n, targets.len())?;
        Ok(Self {
            name: name.into(),
            likelihood,
            targets,
            prior,
        })
    }

    pub fn gp_classification(prior: Arc<GpPrior>, labels: Vec<f64>) -> Result<Self> {
        Self::new("gp-classification", Likelihood::BernoulliLogit, labels, Prior::Gp(prior))
    }

    pub fn gp_regression(prior: Arc<GpPrior>, y: Vec<f64>, noise_var: f64) -> Result<Self> {
        Self::new("gp-regression", Likelihood::Gaussian { noise_var }, y, Prior::Gp(prior))
    }

    pub fn num_examples(&self) -> usize {
        self.targets.len()
    }

    /// Dimension of `q`.
    pub fn latent_dim(&self) -> usize {
        match &self.prior {
            Prior::Gp(p) => p.order(),
            Prior::Glm(x) => x.ncols(),
        }
    }

    pub fn gp_prior(&self) -> Option<&Arc<GpPrior>> {
        match &self.prior {
            Prior::Gp(p) => Some(p),
            Prior::Glm(_) => None,
        }
    }

    /// Lipschitz constant of `∇f` with respect to the marginal means.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        self.likelihood.lipschitz_constant()
    }

    pub fn difficult_value_and_grads(&self, n: usize, m_n: f64, v_n: f64) -> Result<TermValue> {
        if n >= self.num_examples() {
            return Err(domain(format!("example index {n} out of range")));
        }
        self.likelihood.expected_nll(self.targets[n], m_n, v_n)
    }

    /// `(m̃_n, ṽ_n)` for every example.
    pub fn marginals(&self, q: &GaussianVariational) -> Result<Marginals> {
        check_dim(self.latent_dim(), q.dim())?;
        match &self.prior {
            Prior::Gp(_) => Ok(Marginals {
                mean: q.mean.clone(),
                var: q.marginal_variances()?,
            }),
            Prior::Glm(x) => {
                let var = match &q.cov {
                    Covariance::Cholesky(f) => {
                        let xl = x.as_ref() * f.lower();
                        DVector::from_iterator(x.nrows(), xl.row_iter().map(|r| r.norm_squared()))
                    }
                    _ => {
                        let v = q.covariance()?;
                        let xv = x.as_ref() * v.as_matrix();
                        DVector::from_iterator(x.nrows(), (0..x.nrows()).map(|n| xv.row(n).dot(&x.row(n))))
                    }
                };
                Ok(Marginals {
                    mean: x.as_ref() * &q.mean,
                    var,
                })
            }
        }
    }

    /// `f` and its gradients with respect to the marginals.
    pub fn difficult_total(&self, marg: &Marginals) -> Result<(f64, DVector<f64>, DVector<f64>)> {
        let n = self.num_examples();
        let mut value = 0.0;
        let mut dm = DVector::zeros(n);
        let mut dv = DVector::zeros(n);
        for i in 0..n {
            let t = self.difficult_value_and_grads(i, marg.mean[i], marg.var[i])?;
            value += t.value;
            dm[i] = t.d_m;
            dv[i] = t.d_v;
        }
        Ok((value, dm, dv))
    }

    /// `h(q) = KL(q ‖ prior)`.
    pub fn easy_term(&self, q: &GaussianVariational) -> Result<f64> {
        check_dim(self.latent_dim(), q.dim())?;
        match (&self.prior, &q.cov) {
            (Prior::Gp(prior), Covariance::GpCompact { gamma_tilde, .. }) => {
                kl_compact_to_prior(&q.mean, gamma_tilde, prior)
            }
            (Prior::Gp(prior), _) => {
                let zero = DVector::zeros(q.dim());
                kl_gaussian_factored(&q.mean, &q.covariance_factor()?, &zero, prior.chol())
            }
            (Prior::Glm(_), _) => {
                let d = q.dim();
                let zero = DVector::zeros(d);
                let id = CholeskyFactor::from_lower(DMatrix::identity(d, d))?;
                kl_gaussian_factored(&q.mean, &q.covariance_factor()?, &zero, &id)
            }
        }
    }

    /// Maps marginal gradients `(∂f/∂m̃, ∂f/∂ṽ)` plus the KL gradient to
    /// `(∇_m, ∇_V)` of the negative ELBO for a full-covariance `q`.
    pub fn neg_elbo_gradient(
        &self,
        q: &GaussianVariational,
        dm: &DVector<f64>,
        dv: &DVector<f64>,
    ) -> Result<(DVector<f64>, SymmetricMatrix)> {
        let v_inv = q.covariance_factor()?.inverse();
        match &self.prior {
            Prior::Gp(prior) => {
                let k_inv = prior.chol().inverse();
                let gm = dm + prior.chol().solve(&q.mean);
                let gv = k_inv
                    .combine(0.5, &v_inv, -0.5)?
                    .add_diagonal(dv.as_slice())?;
                Ok((gm, gv))
            }
            Prior::Glm(x) => {
                let d = q.dim();
                let gm = x.transpose() * dm + &q.mean;
                let mut xd = x.as_ref().clone();
                for (mut row, s) in xd.row_iter_mut().zip(dv.iter()) {
                    row *= *s;
                }
                let f_v = SymmetricMatrix::from_upper(x.transpose() * xd)?;
                let gv = f_v.combine(1.0, &SymmetricMatrix::identity(d).combine(0.5, &v_inv, -0.5)?, 1.0)?;
                Ok((gm, gv))
            }
        }
    }
}

/// `KL(N(m1, V1) ‖ N(m0, V0))`.
pub fn kl_gaussian(
    m1: &DVector<f64>,
    v1: &SymmetricMatrix,
    m0: &DVector<f64>,
    v0: &SymmetricMatrix,
) -> Result<f64> {
    let d = m1.len();
    check_dim(d, m0.len())?;
    check_dim(d, v1.order())?;
    check_dim(d, v0.order())?;
    kl_gaussian_factored(m1, &CholeskyFactor::new(v1)?, m0, &CholeskyFactor::new(v0)?)
}

/// [`kl_gaussian`] from Cholesky factors of `V1` and `V0`.
pub fn kl_gaussian_factored(m1: &DVector<f64>, l1: &CholeskyFactor, m0: &DVector<f64>, l0: &CholeskyFactor) -> Result<f64> {
    let d = m1.len();
    check_dim(d, m0.len())?;
    check_dim(d, l1.order())?;
    check_dim(d, l0.order())?;
    let tr = l0.solve_lower_mat(l1.lower()).norm_squared();
    let quad = l0.solve_lower(&(m1 - m0)).norm_squared();
    Ok(0.5 * (l0.log_det() - l1.log_det() + tr + quad - d as f64))
}

/// `KL(q ‖ N(0, K))` for `V⁻¹ = K⁻¹ + diag(γ̃)`, via `B = I + Γ^½ K Γ^½`.
pub fn kl_compact_to_prior(mean: &DVector<f64>, gamma_tilde: &[f64], prior: &GpPrior) -> Result<f64> {
    let f = DiagPrecisionFactor::new(prior.kernel(), gamma_tilde)?;
    let quad = prior.chol().solve_lower(mean).norm_squared();
    Ok(0.5 * (f.log_det_b() + f.trace_b_inv() + quad - mean.len() as f64))
}

/// `−Σ f_n − h`, evaluated by quadrature.
pub fn elbo(model: &ModelSplit, q: &GaussianVariational) -> Result<f64> {
    if model.num_examples() == 0 {
        return Ok(-model.easy_term(q)?);
    }
    let marg = model.marginals(q)?;
    let (f, _, _) = model.difficult_total(&marg)?;
    Ok(-f - model.easy_term(q)?)
}

/// Result of a log-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLoss {
    /// `−mean log₂ p̂`.
    pub value: f64,
    /// Number of predictive probabilities clamped at `1e-300`.
    pub clamped: usize,
}

/// Mean base-2 log-loss of predictive probabilities.
pub fn logloss_from_probs(probs: &[f64]) -> Result<LogLoss> {
    if probs.is_empty() {
        return Err(domain("log-loss needs at least one prediction"));
    }
    let mut clamped = 0;
    let mut acc = 0.0;
    for &p in probs {
        let p = if p > 1e-300 {
            p
        } else {
            clamped += 1;
            1e-300
        };
        acc -= p.log2();
    }
    Ok(LogLoss {
        value: acc / probs.len() as f64,
        clamped,
    })
}

/// GP predictive marginals `N(m*, v*)` for the rows of `x_test`.
pub fn gp_predict(
    prior: &GpPrior,
    q: &GaussianVariational,
    x_train: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    cfg: &KernelConfig,
) -> Result<Marginals> {
    check_dim(prior.order(), x_train.nrows())?;
    check_dim(prior.order(), q.dim())?;
    let ks = se_cross_kernel(x_train, x_test, cfg)?;
    let k_ss = cfg.signal_variance();
    let alpha = prior.chol().solve(&q.mean);
    let mean = ks.transpose() * alpha;
    let t = x_test.nrows();
    let var = match &q.cov {
        Covariance::GpCompact { gamma_tilde, .. } => {
            let f = DiagPrecisionFactor::new(prior.kernel(), gamma_tilde)?;
            DVector::from_iterator(
                t,
                (0..t).map(|j| f.predictive_variance(k_ss, &ks.column(j).into_owned())),
            )
        }
        Covariance::Full(_) | Covariance::Cholesky(_) => {
            let a = prior.chol().solve_mat(&ks);
            let lv = q.covariance_factor()?;
            let lta = lv.lower().transpose() * &a;
            DVector::from_iterator(
                t,
                (0..t).map(|j| k_ss - ks.column(j).dot(&a.column(j)) + lta.column(j).norm_squared()),
            )
        }
    };
    Ok(Marginals { mean, var })
}

/// Mean base-2 test log-loss of a GP model.
pub fn predictive_logloss(
    model: &ModelSplit,
    q: &GaussianVariational,
    x_train: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    y_test: &[f64],
    cfg: &KernelConfig,
) -> Result<LogLoss> {
    let prior = model
        .gp_prior()
        .ok_or_else(|| domain("predictive log-loss requires a GP prior"))?;
    check_dim(x_test.nrows(), y_test.len())?;
    let pred = gp_predict(prior, q, x_train, x_test, cfg)?;
    let probs: Vec<f64> = y_test
        .iter()
        .enumerate()
        .map(|(i, &y)| model.likelihood.predictive_prob(y, pred.mean[i], pred.var[i]))
        .collect();
    logloss_from_probs(&probs)
}

/// Correlated topic model for a single document with fixed topics.
#[derive(Debug, Clone)]
pub struct CtmModel {
    /// `N × K`, columns sum to 1.
    pub topic_word: Arc<DMatrix<f64>>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: SymmetricMatrix,
    pub counts: Vec<u32>,
    pub total_words: u64,
}

impl CtmModel {
    pub fn new(
        topic_word: Arc<DMatrix<f64>>,
        prior_mean: DVector<f64>,
        prior_cov: SymmetricMatrix,
        counts: Vec<u32>,
    ) -> Result<Self> {
        validate_topics(&topic_word)?;
        let k = topic_word.ncols();
        check_dim(k, prior_mean.len())?;
        check_dim(k, prior_cov.order())?;
        check_dim(topic_word.nrows(), counts.len())?;
        CholeskyFactor::new(&prior_cov)?;
        let total_words = counts.iter().map(|&c| u64::from(c)).sum();
        Ok(Self {
            topic_word,
            prior_mean,
            prior_cov,
            counts,
            total_words,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.topic_word.ncols()
    }

    /// `g(z) = −Σ_n y_n log Σ_k β_nk softmax_k(z)`, so that `f = E_q[g]`.
    pub fn integrand(&self, z: &DVector<f64>) -> f64 {
        let soft = softmax(z);
        let mut acc = 0.0;
        for (n, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p = self.topic_word.row(n).transpose().dot(&soft);
            acc -= f64::from(c) * p.ln();
        }
        acc
    }
}

pub(crate) fn validate_topics(beta: &DMatrix<f64>) -> Result<()> {
    if beta.ncols() == 0 || beta.nrows() == 0 {
        return Err(domain("topic-word matrix must be nonempty"));
    }
    if beta.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
        return Err(domain("topic-word entries must be finite and >= 0"));
    }
    for (k, col) in beta.column_iter().enumerate() {
        let s: f64 = col.sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(domain(format!("topic {k} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let mx = z.max();
    let e = z.map(|v| (v - mx).exp());
    let s = e.sum();
    e / s
}

/// Stochastic estimate of the CTM difficult term and its gradients.
#[derive(Debug, Clone)]
pub struct CtmGradient {
    pub value: f64,
    /// Monte Carlo standard error of `value`.
    pub value_std_error: f64,
    pub grad_m: DVector<f64>,
    /// Full `∂f/∂V`; take the diagonal for a mean-field `q`.
    pub grad_v: SymmetricMatrix,
}

/// Score-function estimate of `f` and `(∇_m f, ∇_V f)` for one document.
///
/// The integrand is centred at its value at `z = m`. This keeps the estimate
/// unbiased and makes it exactly zero when the integrand does not depend on
/// `z` (a single topic).
pub fn ctm_difficult_grads(model: &CtmModel, q: &GaussianVariational, samples: usize, seed: u64) -> Result<CtmGradient> {
    if samples == 0 {
        return Err(domain("sample count must be >= 1"));
    }
    let k = model.num_topics();
    check_dim(k, q.dim())?;
    let centre = model.integrand(&q.mean);
    let est = score_function_draws(&|z: &DVector<f64>| model.integrand(z) - centre, q, samples, seed)?;
    let grad_m = DVector::from_column_slice(&est.gradient[..k]);
    let gv = DMatrix::from_column_slice(k, k, &est.gradient[k..]);
    Ok(CtmGradient {
        value: centre + est.value,
        value_std_error: (est.value_variance / samples as f64).sqrt(),
        grad_m,
        grad_v: SymmetricMatrix::from_upper(gv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::score_function_estimate;
    use crate::linalg::se_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_prior(n: usize, seed: u64) -> (Arc<GpPrior>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
        let k = se_kernel(&x, &KernelConfig::new(0.0, 0.0).with_jitter(1e-3)).unwrap();
        (Arc::new(GpPrior::new(k).unwrap()), x)
    }

    #[test]
    fn kl_identical_is_zero() {
        let (p, _) = small_prior(5, 1);
        let m = DVector::zeros(5);
        assert!(kl_gaussian(&m, p.kernel(), &m, p.kernel()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_one_dimensional_closed_form() {
        let v1 = SymmetricMatrix::from_diagonal(&[1.0]).unwrap();
        let v0 = SymmetricMatrix::from_diagonal(&[2.0]).unwrap();
        let z = DVector::zeros(1);
        let kl = kl_gaussian(&z, &v1, &z, &v0).unwrap();
        assert!((kl - 0.5 * (2f64.ln() + 0.5 - 1.0)).abs() < 1e-15);
        assert!((kl - 0.0965736).abs() < 1e-7);
    }

    #[test]
    fn kl_one_dimensional_monte_carlo_oracle() {
        // E_{q1}[log q1 − log q0] with q1 = N(0, 1), q0 = N(0, 2).
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let t = -0.5 * z * z + 0.5 * 2f64.ln() + z * z / 4.0;
            acc += t;
            acc2 += t * t;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 0.0965736).abs() < 4.0 * se);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let a = SymmetricMatrix::identity(2);
        let b = SymmetricMatrix::identity(3);
        assert!(kl_gaussian(&DVector::zeros(2), &a, &DVector::zeros(3), &b).is_err());
    }

    #[test]
    fn gaussian_term_closed_form() {
        let t = Likelihood::Gaussian { noise_var: 1.0 }.expected_nll(0.0, 0.0, 1.0).unwrap();
        assert!((t.value - (0.5 * (2.0 * PI).ln() + 0.5)).abs() < 1e-15);
        assert!((t.value - 1.418939).abs() < 1e-6);
        assert_eq!(t.d_m, 0.0);
        assert_eq!(t.d_v, 0.5);
    }

    #[test]
    fn gaussian_term_monte_carlo() {
        let lik = Likelihood::Gaussian { noise_var: 0.5 };
        let (y, m, v): (f64, f64, f64) = (0.3, -0.4, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let t = lik.neg_log_lik(y, m + v.sqrt() * e);
            s += t;
            s2 += t * t;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = lik.expected_nll(y, m, v).unwrap().value;
        assert!((mean - exact).abs() < 4.0 * se);
    }

    #[test]
    fn logit_degenerate_and_symmetric() {
        let t = Likelihood::BernoulliLogit.expected_nll(1.0, 0.0, 1e-14).unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let m = rng.random_range(-10.0..10.0);
            let v = rng.random_range(1e-3..50.0);
            let a = Likelihood::BernoulliLogit.expected_nll(1.0, m, v).unwrap();
            let b = Likelihood::BernoulliLogit.expected_nll(-1.0, -m, v).unwrap();
            assert!((a.value - b.value).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_quadrature_matches_fine_trapezoid() {
        for &(m, v) in &[(0.5, 2.0), (-3.0, 10.0), (8.0, 0.3)] {
            let q = Likelihood::BernoulliLogit.expected_nll(1.0, m, v).unwrap().value;
            let sd = f64::sqrt(v);
            let h = 1e-3;
            let mut acc = 0.0;
            let mut x = -12.0;
            while x <= 12.0 {
                let z = m + sd * x;
                acc += softplus(-z) * (-0.5 * x * x).exp();
                x += h;
            }
            let t = acc * h / (2.0 * PI).sqrt();
            // 64 nodes resolve the kink at z = 0 to ~5e-9 at v = 10; the error
            // grows to ~2e-3 by v = 100.
            assert!((q - t).abs() < 1e-8, "m={m} v={v}: {q} vs {t}");
        }
    }

    #[test]
    fn rejects_nonpositive_variance() {
        assert!(Likelihood::BernoulliLogit.expected_nll(1.0, 0.0, 0.0).is_err());
        assert!(Likelihood::Poisson.expected_nll(1.0, 0.0, -1.0).is_err());
    }

    fn fd_check(lik: Likelihood, y: f64, m: f64, v: f64) {
        let h = 1e-5;
        let t = lik.expected_nll(y, m, v).unwrap();
        let fm = (lik.expected_nll(y, m + h, v).unwrap().value - lik.expected_nll(y, m - h, v).unwrap().value) / (2.0 * h);
        let fv = (lik.expected_nll(y, m, v + h).unwrap().value - lik.expected_nll(y, m, v - h).unwrap().value) / (2.0 * h);
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3);
        assert!(tol(t.d_m, fm), "{lik:?} y={y} m={m} v={v}: d_m {} vs {fm}", t.d_m);
        assert!(tol(t.d_v, fv), "{lik:?} y={y} m={m} v={v}: d_v {} vs {fv}", t.d_v);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let m = rng.random_range(-4.0..4.0);
            let v = rng.random_range(0.01..5.0);
            fd_check(Likelihood::BernoulliLogit, if rng.random_bool(0.5) { 1.0 } else { -1.0 }, m, v);
            fd_check(Likelihood::Gaussian { noise_var: 0.3 }, rng.random_range(-2.0..2.0), m, v);
            fd_check(Likelihood::Poisson, rng.random_range(0..6) as f64, m * 0.5, v * 0.5);
        }
    }

    #[test]
    fn lipschitz_reporting() {
        assert_eq!(Likelihood::Gaussian { noise_var: 0.25 }.lipschitz_constant(), Some(4.0));
        assert_eq!(Likelihood::Poisson.lipschitz_constant(), None);
    }

    #[test]
    fn elbo_of_prior_with_no_data_is_zero() {
        let (p, _) = small_prior(4, 2);
        let x = DMatrix::<f64>::zeros(0, 3);
        let model = ModelSplit::new("empty", Likelihood::BernoulliLogit, vec![], Prior::Glm(Arc::new(x))).unwrap();
        let q = GaussianVariational::full(DVector::zeros(3), SymmetricMatrix::identity(3)).unwrap();
        assert!(elbo(&model, &q).unwrap().abs() < 1e-12);
        let _ = p;
    }

    fn log_evidence(prior: &GpPrior, y: &DVector<f64>, s2: f64) -> f64 {
        let n = y.len();
        let c = prior.kernel().add_diagonal(&vec![s2; n]).unwrap();
        let ch = CholeskyFactor::new(&c).unwrap();
        -0.5 * ch.solve_lower(y).norm_squared() - 0.5 * ch.log_det() - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn conjugate_elbo_at_posterior_equals_evidence() {
        let (p, _) = small_prior(8, 3);
        let s2 = 0.2;
        let y = DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin());
        let model = ModelSplit::gp_regression(p.clone(), y.as_slice().to_vec(), s2).unwrap();
        // Exact posterior: γ̃ = 1/σ², m = K (K + σ²I)⁻¹ y.
        let c = p.kernel().add_diagonal(&[s2; 8]).unwrap();
        let m = p.kernel().mul_vec(&CholeskyFactor::new(&c).unwrap().solve(&y));
        let q = GaussianVariational::compact(m.clone(), vec![1.0 / s2; 8], p.clone()).unwrap();
        let ev = log_evidence(&p, &y, s2);
        assert!((elbo(&model, &q).unwrap() - ev).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mm = &m + DVector::from_fn(8, |_, _| rng.random_range(-0.5..0.5));
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..20.0)).collect();
            let qq = GaussianVariational::compact(mm, g, p.clone()).unwrap();
            assert!(elbo(&model, &qq).unwrap() <= ev + 1e-9);
        }
    }

    #[test]
    fn compact_and_full_agree() {
        let (p, _) = small_prior(6, 5);
        let g = vec![0.3, 1.0, 2.0, 0.01, 5.0, 0.7];
        let m = DVector::from_fn(6, |i, _| i as f64 * 0.1);
        let qc = GaussianVariational::compact(m, g, p.clone()).unwrap();
        let qf = qc.to_full().unwrap();
        let a = qc.marginal_variances().unwrap();
        let b = qf.marginal_variances().unwrap();
        for i in 0..6 {
            assert!((a[i] - b[i]).abs() <= 1e-8 * b[i].abs());
        }
        let model = ModelSplit::gp_classification(p, vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let ec = elbo(&model, &qc).unwrap();
        let ef = elbo(&model, &qf).unwrap();
        assert!((ec - ef).abs() < 1e-8 * ec.abs());
    }

    #[test]
    fn neg_elbo_gradient_matches_finite_differences() {
        let (p, _) = small_prior(5, 6);
        let model = ModelSplit::gp_classification(p.clone(), vec![1.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        let qc = GaussianVariational::compact(
            DVector::from_column_slice(&[0.2, -0.1, 0.4, 0.0, -0.3]),
            vec![0.5, 1.0, 0.2, 2.0, 0.8],
            p,
        )
        .unwrap();
        let q = qc.to_full().unwrap();
        let marg = model.marginals(&q).unwrap();
        let (_, dm, dv) = model.difficult_total(&marg).unwrap();
        let (gm, gv) = model.neg_elbo_gradient(&q, &dm, &dv).unwrap();
        let v = q.covariance().unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let mut mp = q.mean.clone();
            mp[i] += h;
            let mut mn = q.mean.clone();
            mn[i] -= h;
            let fp = -elbo(&model, &GaussianVariational::full(mp, v.clone()).unwrap()).unwrap();
            let fnn = -elbo(&model, &GaussianVariational::full(mn, v.clone()).unwrap()).unwrap();
            let fd = (fp - fnn) / (2.0 * h);
            assert!((fd - gm[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "m[{i}]: {fd} vs {}", gm[i]);

            let mut vp = v.clone().into_inner();
            vp[(i, i)] += h;
            let mut vn = v.clone().into_inner();
            vn[(i, i)] -= h;
            let fp = -elbo(&model, &GaussianVariational::full(q.mean.clone(), SymmetricMatrix::from_upper(vp).unwrap()).unwrap()).unwrap();
            let fnn = -elbo(&model, &GaussianVariational::full(q.mean.clone(), SymmetricMatrix::from_upper(vn).unwrap()).unwrap()).unwrap();
            let fd = (fp - fnn) / (2.0 * h);
            assert!((fd - gv.get(i, i)).abs() <= 1e-4 * fd.abs().max(1e-2), "V[{i}]: {fd} vs {}", gv.get(i, i));
        }
    }

    #[test]
    fn logloss_calibration() {
        assert_eq!(logloss_from_probs(&[0.5, 0.5, 0.5]).unwrap().value, 1.0);
        assert_eq!(logloss_from_probs(&[1.0, 1.0]).unwrap().value, 0.0);
        let r = logloss_from_probs(&[0.0]).unwrap();
        assert_eq!(r.clamped, 1);
    }

    #[test]
    fn predictive_probability_monte_carlo_oracle() {
        let (m, v): (f64, f64) = (0.7, 2.5);
        let p = Likelihood::BernoulliLogit.predictive_prob(1.0, m, v);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let t = sigmoid(m + v.sqrt() * e);
            s += t;
            s2 += t * t;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((p - mean).abs() < 3.0 * se);
    }

    #[test]
    fn predictive_variance_compact_matches_full() {
        let (p, x) = small_prior(6, 9);
        let cfg = KernelConfig::new(0.0, 0.0).with_jitter(1e-3);
        let qc = GaussianVariational::compact(DVector::from_element(6, 0.3), vec![0.4, 2.0, 1.0, 0.1, 3.0, 0.5], p.clone()).unwrap();
        let qf = qc.to_full().unwrap();
        let xt = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -1.0, 0.5]);
        let a = gp_predict(&p, &qc, &x, &xt, &cfg).unwrap();
        let b = gp_predict(&p, &qf, &x, &xt, &cfg).unwrap();
        assert!((a.mean - &b.mean).amax() < 1e-10);
        assert!((a.var - &b.var).amax() < 1e-8);
    }

    fn one_topic_model() -> CtmModel {
        let beta = DMatrix::from_column_slice(3, 1, &[0.2, 0.5, 0.3]);
        CtmModel::new(Arc::new(beta), DVector::zeros(1), SymmetricMatrix::identity(1), vec![2, 0, 3]).unwrap()
    }

    #[test]
    fn ctm_single_topic_gradient_vanishes() {
        let model = one_topic_model();
        let q = GaussianVariational::full(DVector::from_element(1, 0.4), SymmetricMatrix::identity(1)).unwrap();
        let g = ctm_difficult_grads(&model, &q, 500, 3).unwrap();
        assert_eq!(g.grad_m[0], 0.0);
        assert_eq!(g.grad_v.get(0, 0), 0.0);
        let expected = -(2.0 * 0.2f64.ln() + 3.0 * 0.3f64.ln());
        assert!((g.value - expected).abs() < 1e-12);
    }

    #[test]
    fn ctm_two_topic_value_matches_tensor_quadrature() {
        let beta = DMatrix::from_row_slice(3, 2, &[0.6, 0.1, 0.3, 0.2, 0.1, 0.7]);
        let model = CtmModel::new(Arc::new(beta), DVector::zeros(2), SymmetricMatrix::identity(2), vec![3, 1, 4]).unwrap();
        let var = [0.8, 0.5];
        let m = DVector::from_column_slice(&[0.2, -0.3]);
        let q = GaussianVariational::full(m.clone(), SymmetricMatrix::from_diagonal(&var).unwrap()).unwrap();
        let gh = GaussHermite::standard();
        let mut exact = 0.0;
        for (x1, w1) in gh.nodes.iter().zip(&gh.weights) {
            for (x2, w2) in gh.nodes.iter().zip(&gh.weights) {
                let z = DVector::from_column_slice(&[
                    m[0] + (2.0 * var[0]).sqrt() * x1,
                    m[1] + (2.0 * var[1]).sqrt() * x2,
                ]);
                exact += w1 * w2 * model.integrand(&z);
            }
        }
        exact /= PI;
        let s = 20_000;
        let centre = model.integrand(&m);
        let est = score_function_estimate(&|z: &DVector<f64>| model.integrand(z) - centre, &q, s, 11).unwrap();
        let value = centre + est.value;
        let se = (est.value_variance / s as f64).sqrt();
        assert!((value - exact).abs() < 3.0 * se, "{value} vs {exact} (se {se})");
        assert!(ctm_difficult_grads(&model, &q, 0, 1).is_err());
    }

    #[test]
    fn topics_must_be_normalized() {
        let beta = DMatrix::from_column_slice(2, 1, &[0.5, 0.6]);
        assert!(CtmModel::new(Arc::new(beta), DVector::zeros(1), SymmetricMatrix::identity(1), vec![1, 1]).is_err());
    }
}
