mod common;

use common::*;
use proptest::prelude::*;
use pvi_core::expfam::GaussianDist;
use pvi_core::models::{self, Dataset, Hyperparams, ModelKind, OBS_LOG_VARIANCE};

fn fd_gradient(model: &ModelKind, q: &GaussianDist, data: &Dataset, eps: &Hyperparams, seed: u64) -> Vec<f64> {
    let mp = q.mean_params();
    let dim = q.dim();
    let mut out = Vec::with_capacity(2 * dim);
    for which in 0..2 {
        for d in 0..dim {
            let h = 1e-4;
            let f = |s: f64| {
                let (mut mu1, mut mu2) = (mp.mu1.clone(), mp.mu2.clone());
                if which == 0 {
                    mu1[d] += s * h;
                } else {
                    mu2[d] += s * h;
                }
                models::expected_loglik(model, &from_mean_params(&mu1, &mu2), data, eps, seed).unwrap()
            };
            out.push((f(1.0) - f(-1.0)) / (2.0 * h));
        }
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn gradients_agree_with_finite_differences_on_fifty_cases() {
    let mut r = rng(17);
    let eps = Hyperparams::new().with(OBS_LOG_VARIANCE, 0.3);
    let none = Hyperparams::new();
    for case in 0..50 {
        let dim = 1 + case % 4;
        let q = GaussianDist::new(gaussian(&mut r, dim, 1.0, (0.2, 2.0))).unwrap();
        let gm = targets(&mut r, 10, 0.0, 1.0);
        let lr = regression_data(&mut r, 10, dim, 0.4);
        let lg = logistic_data(&mut r, 10, dim, 1.0);
        for (model, data, e, tol) in [
            (ModelKind::GaussianMean, &gm, &eps, 1e-8),
            (ModelKind::LinearRegression, &lr, &eps, 1e-8),
            (ModelKind::logistic(16, 2), &lg, &none, 1e-3),
        ] {
            let g = models::grad_loglik_mean_params(&model, &q, data, e, case as u64).unwrap();
            let err = rel_err(&g.to_flat(), &fd_gradient(&model, &q, data, e, case as u64));
            assert!(err < tol, "{model:?} case {case}: {err:e}");
        }
    }
}

#[test]
fn monte_carlo_and_quadrature_agree() {
    let mut r = rng(5);
    for _ in 0..10 {
        let q = GaussianDist::new(gaussian(&mut r, 2, 0.5, (0.2, 1.0))).unwrap();
        let data = logistic_data(&mut r, 20, 2, 1.0);
        let e = Hyperparams::new();
        let mc = models::expected_loglik(&ModelKind::logistic(4000, 1), &q, &data, &e, 0).unwrap();
        let gh = models::expected_loglik(&ModelKind::logistic_quadrature(61), &q, &data, &e, 0).unwrap();
        assert!((mc - gh).abs() < 0.05 * gh.abs().max(1.0), "{mc} vs {gh}");
    }
}

#[test]
fn gaussian_mean_matches_a_hand_computation() {
    // y = 1, σ² = 1, q = N(0, 1): E log N(1; θ, 1) = -½ log 2π - ½(1 + 1).
    let q = GaussianDist::from_mean_var(&[0.0], &[1.0]).unwrap();
    let data = Dataset::from_targets(&[1.0]);
    let eps = Hyperparams::new().with(OBS_LOG_VARIANCE, 0.0);
    let v = models::expected_loglik(&ModelKind::GaussianMean, &q, &data, &eps, 0).unwrap();
    let want = -0.5 * (2.0 * std::f64::consts::PI).ln() - 1.0;
    assert!((v - want).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expected_loglik_is_additive_over_rows(seed in 0u64..10_000, split in 1usize..19) {
        let mut r = rng(seed);
        let q = GaussianDist::new(gaussian(&mut r, 3, 1.0, (0.2, 2.0))).unwrap();
        let eps = Hyperparams::new().with(OBS_LOG_VARIANCE, -0.2);
        let lr = regression_data(&mut r, 20, 3, 0.5);
        let lg = logistic_data(&mut r, 20, 3, 1.0);
        let idx_a: Vec<usize> = (0..split).collect();
        let idx_b: Vec<usize> = (split..20).collect();
        for (model, data, e, tol) in [
            (ModelKind::LinearRegression, &lr, eps.clone(), 1e-9),
            (ModelKind::logistic(8, 4), &lg, Hyperparams::new(), 1e-9),
        ] {
            let whole = models::expected_loglik(&model, &q, data, &e, 7).unwrap();
            let a = models::expected_loglik(&model, &q, &data.subset(&idx_a), &e, 7).unwrap();
            let b = models::expected_loglik(&model, &q, &data.subset(&idx_b), &e, 7).unwrap();
            prop_assert!((whole - a - b).abs() <= tol * whole.abs().max(1.0));
        }
    }

    #[test]
    fn monte_carlo_estimates_are_pure_functions_of_the_seed(seed in any::<u64>()) {
        let mut r = rng(seed % 1000);
        let q = GaussianDist::new(gaussian(&mut r, 2, 1.0, (0.2, 2.0))).unwrap();
        let data = logistic_data(&mut r, 8, 2, 1.0);
        let m = ModelKind::logistic(8, 1);
        let e = Hyperparams::new();
        let a = models::grad_loglik_mean_params(&m, &q, &data, &e, seed).unwrap();
        let b = models::grad_loglik_mean_params(&m, &q, &data, &e, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
