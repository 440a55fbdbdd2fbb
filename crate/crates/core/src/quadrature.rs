//! Gauss–Hermite quadrature for one-dimensional Gaussian expectations.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Node count used for all deterministic 1-D expectations.
pub const DEFAULT_NODES: usize = 64;

/// Nodes and weights for `∫ e^{−x²} f(x) dx ≈ Σ w_i f(x_i)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes an `n`-point rule by Newton iteration on the orthonormal
    /// Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one node");
        let pim4 = PI.powf(-0.25);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let nf = n as f64;
        let half = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..half {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        Self { nodes: x, weights: w }
    }

    /// Shared 64-node rule.
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES))
    }

    /// `E[f(z)]` for `z ~ N(m, v)`.
    pub fn expect(&self, m: f64, v: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let s = (2.0 * v).sqrt();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(m + s * x);
        }
        acc / PI.sqrt()
    }
}
