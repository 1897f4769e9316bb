//! Likelihood models.
//!
//! Each model exposes what the local updates need from data: the expected
//! log-likelihood `E_q[log p(y|θ)]`, its gradient with respect to the mean
//! parameters of `q`, and derivatives with respect to model hyperparameters.
//!
//! * `GaussianMean`: every coordinate of θ is observed through each row's
//!   target, `y_n ~ N(θ_d, σ_y²)` independently over `d`; features are unused.
//! * `LinearRegression`: `y_n ~ N(x_n·θ, σ_y²)`.
//! * `LogisticRegression`: `y_n ∈ {0, 1}`, `p(y_n = 1) = sigmoid(x_n·θ)`.
//!
//! For the logistic model the expectation of each row only depends on the
//! scalar activation `f = x·θ ~ N(x·m, Σ x_d² v_d)` (local
//! reparameterization), which is estimated either by Monte Carlo with
//! row-keyed streams or by Gauss–Hermite quadrature.

mod data;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use data::{Dataset, Row};

use crate::error::{PviError, Result};
use crate::expfam::{GaussianDist, NaturalParams};
use crate::quadrature::GaussHermite;
use crate::seed;

pub const OBS_LOG_VARIANCE: &str = "obs_log_variance";
pub const PRIOR_LOG_VARIANCE: &str = "prior_log_variance";

/// Default Monte-Carlo sample counts for training and evaluation.
pub const DEFAULT_TRAIN_SAMPLES: usize = 64;
pub const DEFAULT_EVAL_SAMPLES: usize = 1000;

/// Named real hyperparameters, e.g. `obs_log_variance` and `prior_log_variance`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hyperparams(pub BTreeMap<String, f64>);

impl Hyperparams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<f64> {
        self.get(name)
            .ok_or_else(|| PviError::MissingHyper(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.0.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Elementwise `self + step * grad` over the keys of `grad`.
    pub fn ascend(&self, grad: &Hyperparams, step: f64) -> Hyperparams {
        let mut out = self.clone();
        for (k, g) in &grad.0 {
            *out.0.entry(k.clone()).or_insert(0.0) += step * g;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("map of f64 always serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticCfg {
    pub mc_samples: usize,
    pub mc_seed_base: u64,
    /// When set, expectations use Gauss–Hermite quadrature with this many
    /// nodes instead of Monte Carlo.
    #[serde(default)]
    pub quadrature_nodes: Option<usize>,
}

impl Default for LogisticCfg {
    fn default() -> Self {
        LogisticCfg {
            mc_samples: DEFAULT_TRAIN_SAMPLES,
            mc_seed_base: 0,
            quadrature_nodes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    GaussianMean,
    LinearRegression,
    LogisticRegression(LogisticCfg),
}

/// Predictive summary for one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Per-output predictive mean and variance (one output for linear
    /// regression, one per coordinate for `GaussianMean`).
    Regression { mean: Vec<f64>, variance: Vec<f64> },
    Class { probability: f64 },
}

impl ModelKind {
    pub fn logistic(mc_samples: usize, mc_seed_base: u64) -> Self {
        ModelKind::LogisticRegression(LogisticCfg {
            mc_samples,
            mc_seed_base,
            quadrature_nodes: None,
        })
    }

    pub fn logistic_quadrature(nodes: usize) -> Self {
        ModelKind::LogisticRegression(LogisticCfg {
            mc_samples: 1,
            mc_seed_base: 0,
            quadrature_nodes: Some(nodes),
        })
    }

    /// True when every quantity is exact (closed form or deterministic quadrature).
    pub fn is_deterministic(&self) -> bool {
        match self {
            ModelKind::LogisticRegression(c) => c.quadrature_nodes.is_some(),
            _ => true,
        }
    }

    pub fn is_monte_carlo(&self) -> bool {
        !self.is_deterministic()
    }

    /// Hyperparameters owned by the likelihood.
    pub fn hyper_names(&self) -> &'static [&'static str] {
        match self {
            ModelKind::GaussianMean | ModelKind::LinearRegression => &[OBS_LOG_VARIANCE],
            ModelKind::LogisticRegression(_) => &[],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ModelKind::LogisticRegression(c) = self {
            if c.mc_samples == 0 {
                return Err(PviError::InvalidArgument("mc_samples must be >= 1".into()));
            }
            if c.quadrature_nodes == Some(0) {
                return Err(PviError::InvalidArgument(
                    "quadrature_nodes must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn check_hypers(&self, eps: &Hyperparams) -> Result<()> {
        for name in eps.names() {
            if name != PRIOR_LOG_VARIANCE && !self.hyper_names().contains(&name) {
                return Err(PviError::UnknownHyper(name.to_string()));
            }
        }
        Ok(())
    }

    fn check_dim(&self, q_dim: usize, data: &Dataset) -> Result<()> {
        match self {
            ModelKind::GaussianMean => Ok(()),
            _ => match data.feature_dim() {
                Some(d) if d != q_dim => Err(PviError::DimensionMismatch {
                    expected: q_dim,
                    found: d,
                }),
                _ => Ok(()),
            },
        }
    }
}

fn obs_variance(eps: &Hyperparams) -> Result<f64> {
    let s = eps.require(OBS_LOG_VARIANCE)?;
    if !s.is_finite() {
        return Err(PviError::NonFinite {
            context: "obs_log_variance",
            row: None,
        });
    }
    Ok(s.exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log sigmoid(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn finite(v: f64, context: &'static str, row: Option<usize>) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PviError::NonFinite { context, row })
    }
}

/// Per-row expectation of `log p(y|f)` under `f ~ N(a, b)` and its partial
/// derivatives with respect to `a` and `b`.
struct ActivationStats {
    value: f64,
    d_a: f64,
    d_b: f64,
}

fn logistic_row(
    cfg: &LogisticCfg,
    gh: Option<&GaussHermite>,
    y: f64,
    a: f64,
    b: f64,
    stream: u64,
    row: u64,
) -> ActivationStats {
    if let Some(gh) = gh {
        let (mut value, mut d_a, mut d_b) = (0.0, 0.0, 0.0);
        let sd = b.max(0.0).sqrt();
        for (z, p) in gh.standard_normal() {
            let f = a + sd * z;
            let s = sigmoid(f);
            value += p * if y > 0.5 { log_sigmoid(f) } else { log_sigmoid(-f) };
            d_a += p * (y - s);
            // Differentiate the rule itself so value and gradient agree.
            d_b += if sd > 0.0 {
                p * (y - s) * z / (2.0 * sd)
            } else {
                -0.5 * p * s * (1.0 - s)
            };
        }
        return ActivationStats { value, d_a, d_b };
    }
    let mut rng = seed::rng(stream, &[row]);
    let sd = b.max(0.0).sqrt();
    let n = cfg.mc_samples as f64;
    let (mut value, mut d_a, mut d_b) = (0.0, 0.0, 0.0);
    for _ in 0..cfg.mc_samples {
        let eps: f64 = StandardNormal.sample(&mut rng);
        let f = a + sd * eps;
        let g1 = y - sigmoid(f);
        value += if y > 0.5 { log_sigmoid(f) } else { log_sigmoid(-f) };
        d_a += g1;
        if sd > 0.0 {
            d_b += g1 * eps / (2.0 * sd);
        }
    }
    ActivationStats {
        value: value / n,
        d_a: d_a / n,
        d_b: d_b / n,
    }
}

fn logistic_stream(cfg: &LogisticCfg, seed: u64) -> u64 {
    seed::derive(cfg.mc_seed_base, &[seed])
}

fn logistic_rule(cfg: &LogisticCfg) -> Option<GaussHermite> {
    cfg.quadrature_nodes.map(GaussHermite::new)
}

/// Gradient of an expectation with respect to `(m, v)` per coordinate,
/// converted to mean parameters via `v = mu2 - mu1²`.
fn mean_var_grad_to_natural(m: &[f64], d_m: &[f64], d_v: &[f64]) -> Result<NaturalParams> {
    let g1: Vec<f64> = m
        .iter()
        .zip(d_m)
        .zip(d_v)
        .map(|((mi, dm), dv)| dm - 2.0 * mi * dv)
        .collect();
    NaturalParams::new(g1, d_v.to_vec()).map_err(|_| PviError::NonFinite {
        context: "mean-parameter gradient",
        row: None,
    })
}

/// `E_q[log p(data | θ)]` summed over rows.
pub fn expected_loglik(
    model: &ModelKind,
    q: &GaussianDist,
    data: &Dataset,
    eps: &Hyperparams,
    seed: u64,
) -> Result<f64> {
    model.check_dim(q.dim(), data)?;
    model.check_hypers(eps)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let (m, v) = (q.mean(), q.variance());
    match model {
        ModelKind::GaussianMean => {
            let s2 = obs_variance(eps)?;
            let c = -0.5 * (2.0 * PI * s2).ln();
            let mut total = 0.0;
            for (i, r) in data.rows().iter().enumerate() {
                let y = r.target;
                let row: f64 = m
                    .iter()
                    .zip(&v)
                    .map(|(mi, vi)| c - ((y - mi).powi(2) + vi) / (2.0 * s2))
                    .sum();
                total += finite(row, "expected log-likelihood", Some(i))?;
            }
            Ok(total)
        }
        ModelKind::LinearRegression => {
            let s2 = obs_variance(eps)?;
            let c = -0.5 * (2.0 * PI * s2).ln();
            let mut total = 0.0;
            for (i, r) in data.rows().iter().enumerate() {
                let x = &r.features;
                let resid = r.target - dot(x, &m);
                let spread: f64 = x.iter().zip(&v).map(|(xi, vi)| xi * xi * vi).sum();
                let row = c - (resid * resid + spread) / (2.0 * s2);
                total += finite(row, "expected log-likelihood", Some(i))?;
            }
            Ok(total)
        }
        ModelKind::LogisticRegression(cfg) => {
            let gh = logistic_rule(cfg);
            let stream = logistic_stream(cfg, seed);
            let mut total = 0.0;
            for (i, r) in data.rows().iter().enumerate() {
                let x = &r.features;
                let a = dot(x, &m);
                let b: f64 = x.iter().zip(&v).map(|(xi, vi)| xi * xi * vi).sum();
                let st = logistic_row(cfg, gh.as_ref(), r.target, a, b, stream, r.key);
                total += finite(st.value, "expected log-likelihood", Some(i))?;
            }
            Ok(total)
        }
    }
}

/// `d/dμ E_q[log p(data | θ)]`, returned in natural-parameter layout
/// (`eta1` ↔ `d/dmu1`, `eta2` ↔ `d/dmu2`): it is the site implied by the
/// fixed-point update.
pub fn grad_loglik_mean_params(
    model: &ModelKind,
    q: &GaussianDist,
    data: &Dataset,
    eps: &Hyperparams,
    seed: u64,
) -> Result<NaturalParams> {
    model.check_dim(q.dim(), data)?;
    model.check_hypers(eps)?;
    let dim = q.dim();
    if data.is_empty() {
        return Ok(NaturalParams::zeros(dim));
    }
    let (m, v) = (q.mean(), q.variance());
    match model {
        ModelKind::GaussianMean => {
            let s2 = obs_variance(eps)?;
            let sum_y: f64 = data.rows().iter().map(|r| r.target).sum();
            let n = data.len() as f64;
            NaturalParams::new(vec![sum_y / s2; dim], vec![-0.5 * n / s2; dim]).map_err(|_| {
                PviError::NonFinite {
                    context: "mean-parameter gradient",
                    row: None,
                }
            })
        }
        ModelKind::LinearRegression => {
            let s2 = obs_variance(eps)?;
            let mut g1 = vec![0.0; dim];
            let mut g2 = vec![0.0; dim];
            for r in data.rows() {
                let x = &r.features;
                let resid = r.target - dot(x, &m);
                for d in 0..dim {
                    g1[d] += (x[d] * resid + x[d] * x[d] * m[d]) / s2;
                    g2[d] -= 0.5 * x[d] * x[d] / s2;
                }
            }
            NaturalParams::new(g1, g2).map_err(|_| PviError::NonFinite {
                context: "mean-parameter gradient",
                row: None,
            })
        }
        ModelKind::LogisticRegression(cfg) => {
            let gh = logistic_rule(cfg);
            let stream = logistic_stream(cfg, seed);
            let mut d_m = vec![0.0; dim];
            let mut d_v = vec![0.0; dim];
            for (i, r) in data.rows().iter().enumerate() {
                let x = &r.features;
                let a = dot(x, &m);
                let b: f64 = x.iter().zip(&v).map(|(xi, vi)| xi * xi * vi).sum();
                let st = logistic_row(cfg, gh.as_ref(), r.target, a, b, stream, r.key);
                finite(st.d_a + st.d_b, "mean-parameter gradient", Some(i))?;
                for d in 0..dim {
                    d_m[d] += x[d] * st.d_a;
                    d_v[d] += x[d] * x[d] * st.d_b;
                }
            }
            mean_var_grad_to_natural(&m, &d_m, &d_v)
        }
    }
}

/// `E_q[d/dε log p(data | θ, ε)]` for every likelihood hyperparameter in `eps`.
/// Keys owned by the prior are skipped; unknown keys are errors.
pub fn grad_loglik_hyper(
    model: &ModelKind,
    q: &GaussianDist,
    data: &Dataset,
    eps: &Hyperparams,
    _seed: u64,
) -> Result<Hyperparams> {
    model.check_dim(q.dim(), data)?;
    model.check_hypers(eps)?;
    let mut grad = Hyperparams::new();
    let (m, v) = (q.mean(), q.variance());
    match model {
        ModelKind::GaussianMean | ModelKind::LinearRegression => {
            if eps.get(OBS_LOG_VARIANCE).is_none() {
                return Ok(grad);
            }
            let s2 = obs_variance(eps)?;
            let mut g = 0.0;
            for r in data.rows() {
                let y = r.target;
                match model {
                    ModelKind::GaussianMean => {
                        for (mi, vi) in m.iter().zip(&v) {
                            g += -0.5 + ((y - mi).powi(2) + vi) / (2.0 * s2);
                        }
                    }
                    _ => {
                        let x = &r.features;
                        let resid = y - dot(x, &m);
                        let spread: f64 = x.iter().zip(&v).map(|(xi, vi)| xi * xi * vi).sum();
                        g += -0.5 + (resid * resid + spread) / (2.0 * s2);
                    }
                }
            }
            grad.set(OBS_LOG_VARIANCE, g);
        }
        ModelKind::LogisticRegression(_) => {}
    }
    Ok(grad)
}

/// `log p(data | θ)` at a point.
pub fn log_lik_point(
    model: &ModelKind,
    theta: &[f64],
    data: &Dataset,
    eps: &Hyperparams,
) -> Result<f64> {
    model.check_dim(theta.len(), data)?;
    model.check_hypers(eps)?;
    let mut total = 0.0;
    match model {
        ModelKind::GaussianMean => {
            let s2 = obs_variance(eps)?;
            let c = -0.5 * (2.0 * PI * s2).ln();
            for r in data.rows() {
                total += theta
                    .iter()
                    .map(|t| c - (r.target - t).powi(2) / (2.0 * s2))
                    .sum::<f64>();
            }
        }
        ModelKind::LinearRegression => {
            let s2 = obs_variance(eps)?;
            let c = -0.5 * (2.0 * PI * s2).ln();
            for r in data.rows() {
                total += c - (r.target - dot(&r.features, theta)).powi(2) / (2.0 * s2);
            }
        }
        ModelKind::LogisticRegression(_) => {
            for r in data.rows() {
                let f = dot(&r.features, theta);
                total += if r.target > 0.5 {
                    log_sigmoid(f)
                } else {
                    log_sigmoid(-f)
                };
            }
        }
    }
    finite(total, "point log-likelihood", None)
}

/// Posterior predictive for one feature vector.
pub fn predict(
    model: &ModelKind,
    q: &GaussianDist,
    features: &[f64],
    eps: &Hyperparams,
    mc_samples: usize,
    seed: u64,
) -> Result<Prediction> {
    let rows = [Row::new(features.to_vec(), 0.0)];
    let mut out = predict_batch(model, q, &rows, eps, mc_samples, seed)?;
    Ok(out.remove(0))
}

/// Predictions for many rows. The logistic predictive probability averages
/// the sigmoid over draws of the activation `xᵀθ`, from a stream keyed by
/// `(seed, row.key)`.
pub fn predict_batch(
    model: &ModelKind,
    q: &GaussianDist,
    rows: &[Row],
    eps: &Hyperparams,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let (m, v) = (q.mean(), q.variance());
    match model {
        ModelKind::GaussianMean => {
            let s2 = eps.get(OBS_LOG_VARIANCE).map(f64::exp).unwrap_or(0.0);
            Ok(rows
                .iter()
                .map(|_| Prediction::Regression {
                    mean: m.clone(),
                    variance: v.iter().map(|vi| vi + s2).collect(),
                })
                .collect())
        }
        ModelKind::LinearRegression => {
            let s2 = eps.get(OBS_LOG_VARIANCE).map(f64::exp).unwrap_or(0.0);
            rows.iter()
                .map(|r| {
                    if r.features.len() != q.dim() {
                        return Err(PviError::DimensionMismatch {
                            expected: q.dim(),
                            found: r.features.len(),
                        });
                    }
                    let x = &r.features;
                    let spread: f64 = x.iter().zip(&v).map(|(xi, vi)| xi * xi * vi).sum();
                    Ok(Prediction::Regression {
                        mean: vec![dot(x, &m)],
                        variance: vec![spread + s2],
                    })
                })
                .collect()
        }
        ModelKind::LogisticRegression(_) => {
            let n = mc_samples.max(1);
            rows.iter()
                .map(|r| {
                    if r.features.len() != q.dim() {
                        return Err(PviError::DimensionMismatch {
                            expected: q.dim(),
                            found: r.features.len(),
                        });
                    }
                    let x = &r.features;
                    let a = dot(x, &m);
                    let sd = x.iter().zip(&v).map(|(xi, vi)| xi * xi * vi).sum::<f64>().sqrt();
                    let mut rng = seed::rng(seed, &[r.key]);
                    let mut p = 0.0;
                    for _ in 0..n {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p += sigmoid(a + sd * z);
                    }
                    Ok(Prediction::Class {
                        probability: p / n as f64,
                    })
                })
                .collect()
        }
    }
}
