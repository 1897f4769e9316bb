//! Gauss–Hermite quadrature for one-dimensional Gaussian expectations.

use std::f64::consts::PI;

/// Default node count used for moment matching and logistic expectations.
pub const DEFAULT_NODES: usize = 61;

/// Nodes and weights for `∫ e^{-x²} f(x) dx ≈ Σ w_i f(x_i)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Roots of the physicists' Hermite polynomial H_n by Newton iteration on
    /// the orthonormal recurrence, seeded with the usual asymptotic guesses.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let (p1, dp) = Self::orthonormal_hermite(n, z, pim4);
                pp = dp;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            let (_, dp) = Self::orthonormal_hermite(n, z, pim4);
            pp = if dp != 0.0 { dp } else { pp };
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        // Ascending order.
        nodes.reverse();
        weights.reverse();
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussHermite { nodes, weights }
    }

    // Value and derivative of the normalized Hermite polynomial of order n.
    fn orthonormal_hermite(n: usize, z: f64, pim4: f64) -> (f64, f64) {
        let mut p1 = pim4;
        let mut p2 = 0.0;
        for j in 1..=n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        }
        (p1, (2.0 * n as f64).sqrt() * p2)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Standard-normal abscissae `z_i` and probability weights `p_i` such that
    /// `E[f(Z)] ≈ Σ p_i f(z_i)` for `Z ~ N(0, 1)`.
    pub fn standard_normal(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let scale = std::f64::consts::SQRT_2;
        let norm = PI.sqrt().recip();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (scale * x, w * norm))
    }

    /// `E[f(X)]` for `X ~ N(mean, variance)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, variance: f64, mut f: F) -> f64 {
        let sd = variance.max(0.0).sqrt();
        self.standard_normal().map(|(z, p)| p * f(mean + sd * z)).sum()
    }
}
