//! Dense symmetric linear algebra and kernel construction.
//!
//! Storage is `nalgebra` column-major; the Cholesky factorization is
//! implemented here so that a failing pivot can be reported by index.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, domain, Error, Result};

/// Dense symmetric matrix. The upper triangle is authoritative at
/// construction time; the stored matrix is always exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    inner: DMatrix<f64>,
}

impl SymmetricMatrix {
    /// Builds from a square matrix, mirroring its upper triangle.
    pub fn from_upper(mut m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            return Err(domain("symmetric matrix must have order >= 1"));
        }
        check_dim(n, m.ncols())?;
        for j in 0..n {
            for i in (j + 1)..n {
                m[(i, j)] = m[(j, i)];
            }
        }
        Ok(Self { inner: m })
    }

    /// Builds from `f(i, j)` evaluated for `i <= j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if n == 0 {
            return Err(domain("symmetric matrix must have order >= 1"));
        }
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(Self { inner: m })
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "order must be >= 1");
        Self {
            inner: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        if d.is_empty() {
            return Err(domain("symmetric matrix must have order >= 1"));
        }
        Ok(Self {
            inner: DMatrix::from_diagonal(&DVector::from_column_slice(d)),
        })
    }

    pub fn order(&self) -> usize {
        self.inner.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.inner.diagonal()
    }

    /// Returns `self + diag(d)`.
    pub fn add_diagonal(&self, d: &[f64]) -> Result<Self> {
        check_dim(self.order(), d.len())?;
        let mut m = self.inner.clone();
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] += v;
        }
        Ok(Self { inner: m })
    }

    /// Returns `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &SymmetricMatrix, b: f64) -> Result<Self> {
        check_dim(self.order(), other.order())?;
        Ok(Self {
            inner: &self.inner * a + &other.inner * b,
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { inner: &self.inner * a }
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.inner * v
    }

    pub fn is_finite(&self) -> bool {
        self.inner.iter().all(|v| v.is_finite())
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    /// Factorizes `a`. A non-positive (or non-finite) pivot is reported by index.
    pub fn new(a: &SymmetricMatrix) -> Result<Self> {
        let n = a.order();
        let src = a.as_matrix();
        // Column-major, left-looking: column j is finished using columns < j.
        let mut l = vec![0.0f64; n * n];
        for j in 0..n {
            for i in j..n {
                l[j * n + i] = src[(i, j)];
            }
            for k in 0..j {
                let ljk = l[k * n + j];
                if ljk == 0.0 {
                    continue;
                }
                let (head, tail) = l.split_at_mut(j * n);
                let col_k = &head[k * n..k * n + n];
                let col_j = &mut tail[..n];
                for i in j..n {
                    col_j[i] -= col_k[i] * ljk;
                }
            }
            let pivot = l[j * n + j];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
            }
            let d = pivot.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                l[j * n + i] /= d;
            }
        }
        Ok(Self {
            lower: DMatrix::from_vec(n, n, l),
        })
    }

    /// Wraps an existing lower-triangular matrix with positive diagonal.
    pub fn from_lower(lower: DMatrix<f64>) -> Result<Self> {
        let n = lower.nrows();
        check_dim(n, lower.ncols())?;
        for j in 0..n {
            let d = lower[(j, j)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            for i in 0..j {
                if lower[(i, j)] != 0.0 {
                    return Err(domain("factor is not lower triangular"));
                }
            }
        }
        Ok(Self { lower })
    }

    pub fn order(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `log |A| = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("diagonal checked positive at construction")
    }

    /// Solves `L X = B`.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("diagonal checked positive at construction")
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.solve_lower(b);
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("diagonal checked positive at construction")
    }

    /// Solves `A X = B`.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.solve_lower_mat(b);
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("diagonal checked positive at construction")
    }

    /// `A⁻¹` as a symmetric matrix.
    pub fn inverse(&self) -> SymmetricMatrix {
        let n = self.order();
        let inv = self.solve_mat(&DMatrix::identity(n, n));
        SymmetricMatrix::from_upper(inv).expect("square, order >= 1")
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        SymmetricMatrix::from_upper(&self.lower * self.lower.transpose()).expect("square")
    }
}

/// Result of [`factor_and_solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: DMatrix<f64>,
    pub log_det: f64,
}

/// Solves `A X = B` by Cholesky and returns `log |A|` alongside.
pub fn factor_and_solve(a: &SymmetricMatrix, b: &DMatrix<f64>) -> Result<Solution> {
    check_dim(a.order(), b.nrows())?;
    let chol = CholeskyFactor::new(a)?;
    Ok(Solution {
        x: chol.solve_mat(b),
        log_det: chol.log_det(),
    })
}

/// Isotropic squared-exponential kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    /// `log l`.
    pub log_length_scale: f64,
    /// `log σ`.
    pub log_signal_std: f64,
    /// Added to the diagonal of the training kernel.
    pub jitter: f64,
}

impl KernelConfig {
    /// Uses the default jitter `1e-8 σ²`.
    pub fn new(log_length_scale: f64, log_signal_std: f64) -> Self {
        let jitter = 1e-8 * (2.0 * log_signal_std).exp();
        Self {
            log_length_scale,
            log_signal_std,
            jitter,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn signal_variance(&self) -> f64 {
        (2.0 * self.log_signal_std).exp()
    }

    pub fn length_scale(&self) -> f64 {
        self.log_length_scale.exp()
    }

    fn validate(&self) -> Result<()> {
        if !self.log_length_scale.is_finite() || !self.log_signal_std.is_finite() {
            return Err(domain("kernel hyperparameters must be finite"));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(domain("jitter must be finite and >= 0"));
        }
        Ok(())
    }

    fn eval(&self, sq_dist: f64) -> f64 {
        let l2 = (2.0 * self.log_length_scale).exp();
        self.signal_variance() * (-sq_dist / (2.0 * l2)).exp()
    }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, y: &DMatrix<f64>, j: usize) -> f64 {
    (0..x.ncols())
        .map(|c| {
            let d = x[(i, c)] - y[(j, c)];
            d * d
        })
        .sum()
}

fn check_finite_rows(x: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let row = pos % x.nrows().max(1);
        return Err(domain(format!("non-finite input in row {row}")));
    }
    Ok(())
}

/// `K[i][j] = σ² exp(−‖x_i − x_j‖² / (2 l²))`, plus jitter on the diagonal.
pub fn se_kernel(x: &DMatrix<f64>, cfg: &KernelConfig) -> Result<SymmetricMatrix> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(domain("kernel needs at least one input row"));
    }
    check_finite_rows(x)?;
    SymmetricMatrix::from_fn(x.nrows(), |i, j| {
        let v = cfg.eval(sq_dist(x, i, x, j));
        if i == j {
            v + cfg.jitter
        } else {
            v
        }
    })
}

/// Cross-covariance between rows of `a` and rows of `b` (no jitter).
pub fn se_cross_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    check_dim(a.ncols(), b.ncols())?;
    check_finite_rows(a)?;
    check_finite_rows(b)?;
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        cfg.eval(sq_dist(a, i, b, j))
    }))
}

/// `A = K + diag(γ̃)⁻¹`.
pub fn a_matrix(k: &SymmetricMatrix, gamma_tilde: &[f64]) -> Result<SymmetricMatrix> {
    check_dim(k.order(), gamma_tilde.len())?;
    if let Some(i) = gamma_tilde.iter().position(|g| !(*g > 0.0)) {
        return Err(domain(format!(
            "gamma_tilde[{i}] = {} must be strictly positive",
            gamma_tilde[i]
        )));
    }
    let inv: Vec<f64> = gamma_tilde.iter().map(|g| 1.0 / g).collect();
    k.add_diagonal(&inv)
}

/// Factorization of the covariance `V = (K⁻¹ + diag(w))⁻¹` for `w ≥ 0`.
///
/// Works with `B = I + W^½ K W^½`, whose eigenvalues are all ≥ 1, so
/// `K` itself is never inverted. Solves against `K + diag(w)⁻¹` reduce to
/// `W^½ B⁻¹ W^½`.
#[derive(Debug, Clone)]
pub struct DiagPrecisionFactor {
    sqrt_w: DVector<f64>,
    chol_b: CholeskyFactor,
}

impl DiagPrecisionFactor {
    pub fn new(k: &SymmetricMatrix, w: &[f64]) -> Result<Self> {
        let n = k.order();
        check_dim(n, w.len())?;
        if let Some(i) = w.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(domain(format!("precision weight w[{i}] = {} must be >= 0", w[i])));
        }
        let sqrt_w = DVector::from_iterator(n, w.iter().map(|v| v.sqrt()));
        let km = k.as_matrix();
        let b = SymmetricMatrix::from_fn(n, |i, j| {
            let v = sqrt_w[i] * km[(i, j)] * sqrt_w[j];
            if i == j {
                1.0 + v
            } else {
                v
            }
        })?;
        Ok(Self {
            sqrt_w,
            chol_b: CholeskyFactor::new(&b)?,
        })
    }

    pub fn order(&self) -> usize {
        self.sqrt_w.len()
    }

    /// `(K + diag(w)⁻¹)⁻¹ u = W^½ B⁻¹ W^½ u`.
    pub fn solve_a(&self, u: &DVector<f64>) -> DVector<f64> {
        let t = u.component_mul(&self.sqrt_w);
        self.chol_b.solve(&t).component_mul(&self.sqrt_w)
    }

    /// `(I − K (K + diag(w)⁻¹)⁻¹) u`.
    pub fn apply_residual(&self, k: &SymmetricMatrix, u: &DVector<f64>) -> DVector<f64> {
        u - k.mul_vec(&self.solve_a(u))
    }

    /// `v_j = K_jj − κ_jᵀ (K + diag(w)⁻¹)⁻¹ κ_j`.
    pub fn marginal_variance(&self, k: &SymmetricMatrix, j: usize) -> f64 {
        let kappa = k.as_matrix().column(j).component_mul(&self.sqrt_w);
        let t = self.chol_b.solve_lower(&kappa);
        k.get(j, j) - t.norm_squared()
    }

    /// Predictive variance for a new point with prior variance `k_ss` and
    /// cross-covariance `k_s` to the training inputs.
    pub fn predictive_variance(&self, k_ss: f64, k_s: &DVector<f64>) -> f64 {
        let t = self.chol_b.solve_lower(&k_s.component_mul(&self.sqrt_w));
        k_ss - t.norm_squared()
    }

    /// `L_B⁻¹ W^½ K`; its column norms give the reduction of each marginal.
    fn reduction(&self, k: &SymmetricMatrix) -> DMatrix<f64> {
        let mut wk = k.as_matrix().clone();
        for (i, mut row) in wk.row_iter_mut().enumerate() {
            row *= self.sqrt_w[i];
        }
        self.chol_b.solve_lower_mat(&wk)
    }

    /// All marginal variances `diag(V)`.
    pub fn marginal_variances(&self, k: &SymmetricMatrix) -> DVector<f64> {
        let r = self.reduction(k);
        DVector::from_iterator(
            self.order(),
            (0..self.order()).map(|j| k.get(j, j) - r.column(j).norm_squared()),
        )
    }

    /// The full covariance `V`.
    pub fn covariance(&self, k: &SymmetricMatrix) -> SymmetricMatrix {
        let r = self.reduction(k);
        SymmetricMatrix::from_upper(k.as_matrix() - r.transpose() * &r).expect("square")
    }

    /// `log |B| = log |I + K W| = −log |V K⁻¹|`.
    pub fn log_det_b(&self) -> f64 {
        self.chol_b.log_det()
    }

    /// `tr(B⁻¹) = tr(V K⁻¹)`.
    pub fn trace_b_inv(&self) -> f64 {
        let n = self.order();
        let linv = self.chol_b.solve_lower_mat(&DMatrix::identity(n, n));
        linv.norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SymmetricMatrix {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &g * g.transpose() + DMatrix::identity(n, n) * (n as f64) * 0.1;
        SymmetricMatrix::from_upper(a).unwrap()
    }

    #[test]
    fn kernel_zero_distance_is_signal_variance() {
        let x = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.3, -1.0]);
        let cfg = KernelConfig::new(1.0, 2.5).with_jitter(0.0);
        let k = se_kernel(&x, &cfg).unwrap();
        assert_eq!(k.get(0, 1), (5.0f64).exp());
        assert_eq!(k.get(0, 0), (5.0f64).exp());
    }

    #[test]
    fn kernel_matches_formula_for_ionosphere_config() {
        let x = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 1.0, 1.0, 0.0]);
        let cfg = KernelConfig::new(1.0, 2.5);
        let k = se_kernel(&x, &cfg).unwrap();
        let l = 1.0f64.exp();
        let s2 = 5.0f64.exp();
        let expected = s2 * (-5.0 / (2.0 * l * l)).exp();
        assert!((k.get(0, 1) - expected).abs() < 1e-12 * s2);
        assert!((k.get(0, 0) - s2 * (1.0 + 1e-8)).abs() < 1e-9);
    }

    #[test]
    fn kernel_is_psd_by_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-2.0..2.0));
        let cfg = KernelConfig::new(0.0, 0.0).with_jitter(1e-8);
        let k = se_kernel(&x, &cfg).unwrap();
        let eig = SymmetricEigen::new(k.as_matrix().clone());
        assert!(eig.eigenvalues.iter().all(|&e| e >= 0.0), "{:?}", eig.eigenvalues);
    }

    #[test]
    fn kernel_rejects_non_finite() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(
            se_kernel(&x, &KernelConfig::new(0.0, 0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kernel_row_permutation_permutes_rows_and_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = DMatrix::from_fn(6, 2, |i, j| x[(perm[i], j)]);
        let cfg = KernelConfig::new(0.2, 0.1);
        let k = se_kernel(&x, &cfg).unwrap();
        let kp = se_kernel(&xp, &cfg).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(kp.get(i, j), k.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let b = DMatrix::from_column_slice(2, 1, &[2.0, 4.0]);
        let s = factor_and_solve(&SymmetricMatrix::identity(2), &b).unwrap();
        assert_eq!(s.x, b);
        assert_eq!(s.log_det, 0.0);

        let s = factor_and_solve(&SymmetricMatrix::from_diagonal(&[2.0, 2.0]).unwrap(), &b).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-15 && (s.x[1] - 2.0).abs() < 1e-15);
        assert!((s.log_det - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn solve_random_spd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(8, &mut rng);
        let b = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let s = factor_and_solve(&a, &b).unwrap();
        let r = a.as_matrix() * &s.x - &b;
        assert!(r.norm() / b.norm() <= 1e-10);
        let eig = SymmetricEigen::new(a.as_matrix().clone());
        let ld: f64 = eig.eigenvalues.iter().map(|e| e.ln()).sum();
        assert!((ld - s.log_det).abs() < 1e-10);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = SymmetricMatrix::from_upper(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 1.0],
        ))
        .unwrap();
        match CholeskyFactor::new(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cholesky_reconstructs_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(12, &mut rng);
        let c = CholeskyFactor::new(&a).unwrap();
        let rel = (c.reconstruct().as_matrix() - a.as_matrix()).norm() / a.as_matrix().norm();
        assert!(rel < 1e-10);
        assert!(c.lower().diagonal().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn upper_triangle_is_authoritative() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, -7.0, 2.0]);
        let s = SymmetricMatrix::from_upper(m).unwrap();
        assert_eq!(s.get(1, 0), 5.0);
    }

    #[test]
    fn a_matrix_small_cases() {
        let k = SymmetricMatrix::from_diagonal(&[1.0]).unwrap();
        assert_eq!(a_matrix(&k, &[1.0]).unwrap().get(0, 0), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_spd(4, &mut rng);
        let a = a_matrix(&k, &[1e12; 4]).unwrap();
        assert!((a.as_matrix() - k.as_matrix()).amax() < 1e-6);
        assert!(matches!(a_matrix(&k, &[1.0, 0.0, 1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn a_matrix_is_spd_for_positive_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = random_spd(6, &mut rng);
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..10.0)).collect();
        assert!(CholeskyFactor::new(&a_matrix(&k, &g).unwrap()).is_ok());
    }

    #[test]
    fn diag_precision_factor_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = random_spd(7, &mut rng);
        let w: Vec<f64> = (0..7)
            .map(|i| if i == 2 { 0.0 } else { rng.random_range(0.1..3.0) })
            .collect();
        let f = DiagPrecisionFactor::new(&k, &w).unwrap();
        let prec = CholeskyFactor::new(&k).unwrap().inverse().add_diagonal(&w).unwrap();
        let v = CholeskyFactor::new(&prec).unwrap().inverse();
        let vf = f.covariance(&k);
        assert!((v.as_matrix() - vf.as_matrix()).amax() < 1e-10);
        let diag = f.marginal_variances(&k);
        for j in 0..7 {
            assert!((diag[j] - v.get(j, j)).abs() < 1e-10);
            assert!((f.marginal_variance(&k, j) - v.get(j, j)).abs() < 1e-10);
        }
        // log|B| = log|K| − log|V|, tr(B⁻¹) = tr(V K⁻¹)
        let ld_k = CholeskyFactor::new(&k).unwrap().log_det();
        let ld_v = CholeskyFactor::new(&v).unwrap().log_det();
        assert!((f.log_det_b() - (ld_k - ld_v)).abs() < 1e-9);
        let kinv = CholeskyFactor::new(&k).unwrap().inverse();
        let tr = (v.as_matrix() * kinv.as_matrix()).trace();
        assert!((f.trace_b_inv() - tr).abs() < 1e-9);
    }

    #[test]
    fn diag_precision_solve_matches_a_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = random_spd(5, &mut rng);
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..3.0)).collect();
        let u = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let f = DiagPrecisionFactor::new(&k, &g).unwrap();
        let a = a_matrix(&k, &g).unwrap();
        let direct = CholeskyFactor::new(&a).unwrap().solve(&u);
        assert!((f.solve_a(&u) - direct).amax() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn spd_residual_small(n in 1usize..=32, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_spd(n, &mut rng);
                let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
                let s = factor_and_solve(&a, &b).unwrap();
                let r = a.as_matrix() * &s.x - &b;
                prop_assert!(r.norm() / b.norm().max(1e-300) <= 1e-10);
            }

            #[test]
            fn a_matrix_spd_for_psd_kernel(n in 1usize..=12, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
                let k = se_kernel(&x, &KernelConfig::new(0.5, 0.0).with_jitter(0.0)).unwrap();
                let g: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1e3)).collect();
                prop_assert!(CholeskyFactor::new(&a_matrix(&k, &g).unwrap()).is_ok());
            }
        }
    }
}
