#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pvi_core::expfam::{GaussianDist, MeanParams, NaturalParams};
use pvi_core::models::{Dataset, Row};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo..hi)
}

pub fn gaussian(r: &mut ChaCha8Rng, dim: usize, mean_sd: f64, var: (f64, f64)) -> NaturalParams {
    let m: Vec<f64> = (0..dim).map(|_| mean_sd * normal(r)).collect();
    let v: Vec<f64> = (0..dim).map(|_| uniform(r, var.0, var.1)).collect();
    NaturalParams::from_mean_var(&m, &v).unwrap()
}

/// A site with proper (negative) `eta2` and modest `eta1`.
pub fn proper_site(r: &mut ChaCha8Rng, dim: usize) -> NaturalParams {
    let e1 = (0..dim).map(|_| normal(r)).collect();
    let e2 = (0..dim).map(|_| -uniform(r, 0.05, 1.0)).collect();
    NaturalParams::new(e1, e2).unwrap()
}

pub fn regression_data(r: &mut ChaCha8Rng, n: usize, dim: usize, noise: f64) -> Dataset {
    let w: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
    let rows = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise * normal(r);
            Row::new(x, y)
        })
        .collect();
    Dataset::new(rows).unwrap()
}

pub fn targets(r: &mut ChaCha8Rng, n: usize, centre: f64, sd: f64) -> Dataset {
    let ys: Vec<f64> = (0..n).map(|_| centre + sd * normal(r)).collect();
    Dataset::from_targets(&ys)
}

/// Binary labels from a noisy logistic rule over `dim` features.
pub fn logistic_data(r: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> Dataset {
    let w: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
    let rows = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| scale * normal(r)).collect();
            let f: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let y = if uniform(r, 0.0, 1.0) < 1.0 / (1.0 + (-f).exp()) { 1.0 } else { 0.0 };
            Row::new(x, y)
        })
        .collect();
    Dataset::new(rows).unwrap()
}

pub fn from_mean_params(mu1: &[f64], mu2: &[f64]) -> GaussianDist {
    let eta = MeanParams::new(mu1.to_vec(), mu2.to_vec())
        .unwrap()
        .to_natural()
        .unwrap();
    GaussianDist::new(eta).unwrap()
}

/// `log N(y; mean, cov)` through a Cholesky factorization.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = cov.cholesky().expect("covariance must be positive definite");
    let r = y - mean;
    let z = chol.l().solve_lower_triangular(&r).unwrap();
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + z.dot(&z))
}

pub fn design(data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.len();
    let d = data.feature_dim().unwrap();
    let x = DMatrix::from_fn(n, d, |i, j| data.rows()[i].features[j]);
    let y = DVector::from_iterator(n, data.rows().iter().map(|r| r.target));
    (x, y)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn flat(eta: &NaturalParams) -> Vec<f64> {
    eta.to_flat()
}
