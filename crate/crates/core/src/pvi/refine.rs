use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{GaussianDist, NaturalParams};
use crate::models::{self, Dataset, Hyperparams, ModelKind, OBS_LOG_VARIANCE};

use super::free_energy::{local_free_energy_at, Shards};
use super::state::{PosteriorState, ShardId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Closed-form local optimum (Gaussian-mean and linear-regression models).
    Analytic,
    /// Damped fixed-point iteration on the site parameters.
    FixedPoint,
    /// Adam on the mean and log standard deviation of `q`.
    GradientAscent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalOptimizerCfg {
    pub strategy: Strategy,
    pub rho: f64,
    pub inner_steps: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub max_halvings: u32,
}

impl Default for LocalOptimizerCfg {
    fn default() -> Self {
        LocalOptimizerCfg {
            strategy: Strategy::FixedPoint,
            rho: 1.0,
            inner_steps: 1,
            step_size: 0.05,
            tolerance: 1e-8,
            max_halvings: 10,
        }
    }
}

impl LocalOptimizerCfg {
    pub fn fixed_point(rho: f64, inner_steps: usize) -> Self {
        LocalOptimizerCfg {
            rho,
            inner_steps,
            ..Self::default()
        }
    }

    pub fn gradient(step_size: f64, inner_steps: usize) -> Self {
        LocalOptimizerCfg {
            strategy: Strategy::GradientAscent,
            step_size,
            inner_steps,
            tolerance: 0.0,
            ..Self::default()
        }
    }

    pub fn analytic() -> Self {
        LocalOptimizerCfg {
            strategy: Strategy::Analytic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(PviError::InvalidArgument(format!(
                "rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        if self.inner_steps == 0 {
            return Err(PviError::InvalidArgument("inner_steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(PviError::InvalidArgument(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.tolerance >= 0.0) {
            return Err(PviError::InvalidArgument("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// One record of a run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub shard_id: ShardId,
    pub local_free_energy: f64,
    pub global_free_energy: Option<f64>,
    pub site_delta_norm: f64,
    pub hyper: Hyperparams,
}

fn trace_row(
    before: &PosteriorState,
    after: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<TraceRow> {
    let local = local_free_energy_at(before, id, after.q(), data, model, eps, seed)?;
    let delta = after
        .site(id)?
        .natural
        .linf_distance(&before.site(id)?.natural);
    Ok(TraceRow {
        iteration: 0,
        shard_id: id,
        local_free_energy: local,
        global_free_energy: None,
        site_delta_norm: delta,
        hyper: eps.clone(),
    })
}

/// Refine shard `id` with the configured strategy.
pub fn refine(
    state: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    cfg: &LocalOptimizerCfg,
    seed: u64,
) -> Result<(PosteriorState, TraceRow)> {
    match cfg.strategy {
        Strategy::Analytic => refine_analytic(state, id, data, model, eps, seed),
        Strategy::FixedPoint => refine_fixed_point(state, id, data, model, eps, cfg, seed),
        Strategy::GradientAscent => refine_gradient(state, id, data, model, eps, cfg, seed),
    }
}

/// Set `site ← (1-ρ)·site + ρ·target`, halving `ρ` while the posterior
/// would be improper.
fn damped_replace(
    cur: &PosteriorState,
    id: ShardId,
    target: &NaturalParams,
    rho: f64,
    max_halvings: u32,
    step: usize,
) -> Result<PosteriorState> {
    let site = &cur.site(id)?.natural;
    let mut r = rho;
    for _ in 0..=max_halvings {
        let cand = site.interpolate(target, r)?;
        match cur.with_site(id, cand) {
            Ok(s) => return Ok(s),
            Err(PviError::NotNormalizable { .. }) => r *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(PviError::Divergence {
        shard: id,
        iteration: step,
        reason: format!("posterior stayed improper after {max_halvings} halvings of rho"),
    })
}

/// Damped fixed-point updates `t ← (1-ρ)·t + ρ·d/dμ E_q log p(y|θ)`.
pub fn refine_fixed_point(
    state: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    cfg: &LocalOptimizerCfg,
    seed: u64,
) -> Result<(PosteriorState, TraceRow)> {
    cfg.validate()?;
    state.cavity(id)?;
    let mut cur = state.clone();
    for step in 0..cfg.inner_steps {
        let g = models::grad_loglik_mean_params(model, cur.q(), data, eps, seed)?;
        let next = damped_replace(&cur, id, &g, cfg.rho, cfg.max_halvings, step)?;
        let delta = next.site(id)?.natural.linf_distance(&cur.site(id)?.natural);
        cur = next;
        if delta < cfg.tolerance {
            break;
        }
    }
    let row = trace_row(state, &cur, id, data, model, eps, seed)?;
    Ok((cur, row))
}

/// The same update written as a mirror-descent step in mean-parameter space:
/// `η_new = ∇A*(μ_old) + ρ(g - η_site)`, mapped back through the sites.
pub fn mirror_step(
    state: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    rho: f64,
    seed: u64,
) -> Result<PosteriorState> {
    LocalOptimizerCfg::fixed_point(rho, 1).validate()?;
    let cav = state.cavity(id)?;
    let mu_old = state.q().mean_params();
    let eta_old = mu_old.to_natural()?;
    let g = models::grad_loglik_mean_params(model, state.q(), data, eps, seed)?;
    let site = &state.site(id)?.natural;
    let mut r = rho;
    for _ in 0..=crate::tolerance::DEFAULT.max_halvings {
        let e1: Vec<f64> = (0..state.dim())
            .map(|d| eta_old.eta1()[d] + r * (g.eta1()[d] - site.eta1()[d]))
            .collect();
        let e2: Vec<f64> = (0..state.dim())
            .map(|d| eta_old.eta2()[d] + r * (g.eta2()[d] - site.eta2()[d]))
            .collect();
        let eta_new = NaturalParams::new(e1, e2)?;
        if eta_new.is_normalizable() {
            let new_site = eta_new.divide(&cav)?;
            return state.with_site(id, new_site);
        }
        r *= 0.5;
    }
    Err(PviError::Divergence {
        shard: id,
        iteration: 0,
        reason: "posterior stayed improper after halving rho".into(),
    })
}

/// Closed-form maximizer of the local free energy for conjugate models.
pub fn refine_analytic(
    state: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<(PosteriorState, TraceRow)> {
    let cav = state.cavity(id)?;
    let site = match model {
        ModelKind::GaussianMean => {
            models::grad_loglik_mean_params(model, state.q(), data, eps, seed)?
        }
        ModelKind::LinearRegression => {
            let q_new = linear_regression_mean_field(&cav, data, eps)?;
            q_new.divide(&cav)?
        }
        ModelKind::LogisticRegression(_) => {
            return Err(PviError::InvalidArgument(
                "analytic local updates need a conjugate model".into(),
            ))
        }
    };
    let next = state.with_site(id, site)?;
    let row = trace_row(state, &next, id, data, model, eps, seed)?;
    Ok((next, row))
}

/// Mean-field optimum of `-KL(q ‖ cavity) + E_q log p(y|θ)` for linear
/// regression: variances are `1 / Λ_dd` and the mean solves `Λ m = b`, with
/// `Λ = diag(cavity precision) + XᵀX/σ²` and `b = η_1(cavity) + Xᵀy/σ²`.
pub fn linear_regression_mean_field(
    cavity: &NaturalParams,
    data: &Dataset,
    eps: &Hyperparams,
) -> Result<NaturalParams> {
    let dim = cavity.dim();
    let s2 = eps.require(OBS_LOG_VARIANCE)?.exp();
    let mut lambda = vec![vec![0.0; dim]; dim];
    let mut b = cavity.eta1().to_vec();
    for d in 0..dim {
        lambda[d][d] = -2.0 * cavity.eta2()[d];
    }
    for r in data.rows() {
        let x = &r.features;
        if x.len() != dim {
            return Err(PviError::DimensionMismatch {
                expected: dim,
                found: x.len(),
            });
        }
        for i in 0..dim {
            b[i] += x[i] * r.target / s2;
            for j in 0..dim {
                lambda[i][j] += x[i] * x[j] / s2;
            }
        }
    }
    let prec: Vec<f64> = (0..dim).map(|d| lambda[d][d]).collect();
    let mean = solve(lambda, b)?;
    let eta1 = mean.iter().zip(&prec).map(|(m, p)| m * p).collect();
    let eta2 = prec.iter().map(|p| -0.5 * p).collect();
    NaturalParams::new(eta1, eta2)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[piv][col].abs() < 1e-300 {
            return Err(PviError::InvalidArgument("singular linear system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Ok(x)
}

/// Gradient of the local objective `-KL(q ‖ cavity) + E_q log p` with
/// respect to `(m_d, log sd_d)`.
fn local_objective_grad(
    q: &GaussianDist,
    cav: &GaussianDist,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = models::grad_loglik_mean_params(model, q, data, eps, seed)?;
    let (m, v) = (q.mean(), q.variance());
    let (mc, vc) = (cav.mean(), cav.variance());
    let mut gm = vec![0.0; q.dim()];
    let mut gr = vec![0.0; q.dim()];
    for d in 0..q.dim() {
        let (g1, g2) = (g.eta1()[d], g.eta2()[d]);
        gm[d] = g1 + 2.0 * m[d] * g2 - (m[d] - mc[d]) / vc[d];
        let dv = g2 - 0.5 * (1.0 / vc[d] - 1.0 / v[d]);
        gr[d] = 2.0 * v[d] * dv;
    }
    Ok((gm, gr))
}

/// Adam on the local free energy over `(mean, log sd)` of `q`, followed by
/// the site update `t_new = (q_new / q_old) · t_old`. For deterministic
/// models the best iterate seen is kept.
pub fn refine_gradient(
    state: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    cfg: &LocalOptimizerCfg,
    seed: u64,
) -> Result<(PosteriorState, TraceRow)> {
    cfg.validate()?;
    let cav = GaussianDist::new(state.cavity(id)?)?;
    let dim = state.dim();
    let mut mean = state.q().mean();
    let mut logsd: Vec<f64> = state.q().variance().iter().map(|v| 0.5 * v.ln()).collect();
    let (b1, b2, tiny) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; 2 * dim];
    let mut m2 = vec![0.0; 2 * dim];
    let track = model.is_deterministic();
    let objective = |q: &GaussianDist| local_free_energy_at(state, id, q, data, model, eps, seed);
    let mut best_q = state.q().clone();
    let mut best = if track { objective(&best_q)? } else { 0.0 };

    for step in 1..=cfg.inner_steps {
        let var: Vec<f64> = logsd.iter().map(|r| (2.0 * r).exp()).collect();
        let q = GaussianDist::from_mean_var(&mean, &var).map_err(|e| PviError::Divergence {
            shard: id,
            iteration: step,
            reason: e.to_string(),
        })?;
        let (gm, gr) = local_objective_grad(&q, &cav, data, model, eps, seed)?;
        let grad: Vec<f64> = gm.into_iter().chain(gr).collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(PviError::NonFinite {
                context: "local free-energy gradient",
                row: None,
            });
        }
        if grad.iter().all(|g| g.abs() <= cfg.tolerance) {
            break;
        }
        let t = step as i32;
        for (k, g) in grad.iter().enumerate() {
            m1[k] = b1 * m1[k] + (1.0 - b1) * g;
            m2[k] = b2 * m2[k] + (1.0 - b2) * g * g;
            let mh = m1[k] / (1.0 - f64::powi(b1, t));
            let vh = m2[k] / (1.0 - f64::powi(b2, t));
            let upd = cfg.step_size * mh / (vh.sqrt() + tiny);
            if k < dim {
                mean[k] += upd;
            } else {
                logsd[k - dim] += upd;
            }
        }
        if track {
            let var: Vec<f64> = logsd.iter().map(|r| (2.0 * r).exp()).collect();
            let cand = GaussianDist::from_mean_var(&mean, &var)?;
            let f = objective(&cand)?;
            if f > best {
                best = f;
                best_q = cand;
            }
        }
    }
    let q_new = if track {
        best_q
    } else {
        let var: Vec<f64> = logsd.iter().map(|r| (2.0 * r).exp()).collect();
        GaussianDist::from_mean_var(&mean, &var)?
    };
    let delta = q_new.natural().divide(state.posterior())?;
    let site = state.site(id)?.natural.multiply(&delta)?;
    let next = state.with_site(id, site)?;
    let row = trace_row(state, &next, id, data, model, eps, seed)?;
    Ok((next, row))
}

/// Every site updated from the same posterior:
/// `t_m ← (1-ρ)·t_m + ρ·d/dμ E_q log p(y_m|θ)` for all `m` at once.
pub fn parallel_fixed_point_step(
    state: &PosteriorState,
    shards: &Shards,
    model: &ModelKind,
    eps: &Hyperparams,
    rho: f64,
    seed: u64,
) -> Result<PosteriorState> {
    let q = state.q();
    let grads: Vec<(ShardId, NaturalParams)> = shards
        .par_iter()
        .map(|(&id, data)| {
            models::grad_loglik_mean_params(model, q, data, eps, seed).map(|g| (id, g))
        })
        .collect::<Result<_>>()?;
    let mut r = rho;
    for _ in 0..=crate::tolerance::DEFAULT.max_halvings {
        let updates = grads
            .iter()
            .map(|(id, g)| Ok((*id, state.site(*id)?.natural.interpolate(g, r)?)))
            .collect::<Result<Vec<_>>>()?;
        match state.with_sites(updates) {
            Ok(s) => return Ok(s),
            Err(PviError::NotNormalizable { .. }) => r *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(PviError::Divergence {
        shard: 0,
        iteration: 0,
        reason: "parallel update stayed improper after halving rho".into(),
    })
}

/// Stochastic natural-gradient step of global VI on one of `num_batches`
/// equally sized batches: `η ← (1-ρ)·η_q + ρ·(η_0 + L·g_batch)`.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_global_step(
    q: &GaussianDist,
    prior: &NaturalParams,
    batch: &Dataset,
    num_batches: usize,
    rho: f64,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<NaturalParams> {
    let g = models::grad_loglik_mean_params(model, q, batch, eps, seed)?;
    let target = prior.multiply(&g.scale(num_batches as f64))?;
    q.natural().interpolate(&target, rho)
}
