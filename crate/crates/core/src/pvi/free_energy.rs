use std::collections::BTreeMap;

use crate::error::{PviError, Result};
use crate::expfam::{GaussianDist, NaturalParams};
use crate::models::{self, Dataset, Hyperparams, ModelKind, PRIOR_LOG_VARIANCE};

use super::state::{PosteriorState, ShardId};

/// Data of every shard, keyed by shard id.
pub type Shards = BTreeMap<ShardId, Dataset>;

/// Local free energy of shard `id` evaluated at the current posterior.
pub fn local_free_energy(
    state: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<f64> {
    local_free_energy_at(state, id, state.q(), data, model, eps, seed)
}

/// Local free energy of a candidate `q` for the refinement of shard `id`
/// starting from `state`:
///
/// `F(q) = E_q[log q_old(θ) p(y_id|θ) / (q(θ) t_id(θ))]`
///      `= -KL(q ‖ cavity) + E_q log p(y_id|θ) + A(cavity) - A(q_old) - c_id`
///
/// where `c_id` is the site's log-scale. With this constant convention the
/// local energies of all shards sum to the global free energy whenever they
/// are evaluated at the current posterior.
pub fn local_free_energy_at(
    state: &PosteriorState,
    id: ShardId,
    q: &GaussianDist,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<f64> {
    let cav = GaussianDist::new(state.cavity(id)?)?;
    let site = state.site(id)?;
    let kl = q.kl(&cav)?;
    let ell = models::expected_loglik(model, q, data, eps, seed)?;
    let value = -kl + ell + cav.log_partition() - state.q().log_partition() - site.log_scale;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(PviError::NonFinite {
            context: "local free energy",
            row: None,
        })
    }
}

/// `-KL(q ‖ p) + Σ_m E_q log p(y_m|θ)`.
pub fn global_free_energy_at(
    q: &GaussianDist,
    prior: &NaturalParams,
    shards: &Shards,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<f64> {
    let p = GaussianDist::new(prior.clone())?;
    let mut total = -q.kl(&p)?;
    for data in shards.values() {
        total += models::expected_loglik(model, q, data, eps, seed)?;
    }
    Ok(total)
}

pub fn global_free_energy(
    state: &PosteriorState,
    shards: &Shards,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<f64> {
    global_free_energy_at(state.q(), state.prior(), shards, model, eps, seed)
}

/// Prior `N(mean, exp(prior_log_variance))` per coordinate.
pub fn prior_from_hyper(mean: &[f64], eps: &Hyperparams) -> Result<NaturalParams> {
    let v = eps.require(PRIOR_LOG_VARIANCE)?.exp();
    NaturalParams::from_mean_var(mean, &vec![v; mean.len()])
}

/// Gradient of the global free energy with respect to the hyperparameters in
/// `eps`, holding `q` fixed.
///
/// The prior term is `(μ_q - μ_0)ᵀ dη_0/dε`; for `s = prior_log_variance`
/// and a prior `N(m_0, e^s)`, `dη_1/ds = -m_0/v_0` and `dη_2/ds = 1/(2 v_0)`.
pub fn hyper_gradient(
    state: &PosteriorState,
    shards: &Shards,
    model: &ModelKind,
    eps: &Hyperparams,
    seed: u64,
) -> Result<Hyperparams> {
    let mut grad = Hyperparams::new();
    for name in eps.names() {
        grad.set(name, 0.0);
    }
    for data in shards.values() {
        let g = models::grad_loglik_hyper(model, state.q(), data, eps, seed)?;
        for (k, v) in g.0 {
            *grad.0.entry(k).or_insert(0.0) += v;
        }
    }
    if eps.get(PRIOR_LOG_VARIANCE).is_some() {
        grad.set(PRIOR_LOG_VARIANCE, prior_term(state.q(), state.prior())?);
    }
    Ok(grad)
}

/// `(μ_q - μ_0)ᵀ dη_0/ds` for the prior log-variance `s`.
pub fn prior_term(q: &GaussianDist, prior: &NaturalParams) -> Result<f64> {
    let p = GaussianDist::new(prior.clone())?;
    let mq = q.mean_params();
    let m0 = p.mean_params();
    let (mean0, var0) = (p.mean(), p.variance());
    let mut total = 0.0;
    for d in 0..q.dim() {
        total += (mq.mu1[d] - m0.mu1[d]) * (-mean0[d] / var0[d])
            + (mq.mu2[d] - m0.mu2[d]) / (2.0 * var0[d]);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::OBS_LOG_VARIANCE;
    use std::f64::consts::PI;

    fn eps0() -> Hyperparams {
        Hyperparams::new().with(OBS_LOG_VARIANCE, 0.0)
    }

    #[test]
    fn zero_data_local_energy_peaks_at_prior() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let s = PosteriorState::init(prior, &[0]).unwrap();
        let empty = Dataset::empty();
        let m = ModelKind::GaussianMean;
        let at_prior = local_free_energy(&s, 0, &empty, &m, &eps0(), 0).unwrap();
        assert_eq!(at_prior, 0.0);
        let other = GaussianDist::from_mean_var(&[0.3], &[0.7]).unwrap();
        assert!(local_free_energy_at(&s, 0, &other, &empty, &m, &eps0(), 0).unwrap() < 0.0);
    }

    #[test]
    fn conjugate_optimum_gives_log_evidence() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let s = PosteriorState::init(prior.clone(), &[0]).unwrap();
        let data = Dataset::from_targets(&[2.0]);
        let m = ModelKind::GaussianMean;
        let q = GaussianDist::from_mean_var(&[1.0], &[0.5]).unwrap();
        let f = local_free_energy_at(&s, 0, &q, &data, &m, &eps0(), 0).unwrap();
        // y ~ N(0, 2) marginally.
        let evidence = -0.5 * (2.0 * PI * 2.0).ln() - 4.0 / 4.0;
        assert!((f - evidence).abs() < 1e-12);
        let shards: Shards = [(0, data)].into_iter().collect();
        let g = global_free_energy_at(&q, &prior, &shards, &m, &eps0(), 0).unwrap();
        assert!((g - evidence).abs() < 1e-12);
    }

    #[test]
    fn global_energy_is_zero_at_prior_without_data() {
        let prior = NaturalParams::isotropic(3, 0.1, 2.0).unwrap();
        let s = PosteriorState::init(prior, &[]).unwrap();
        let shards = Shards::new();
        let f = global_free_energy(&s, &shards, &ModelKind::GaussianMean, &eps0(), 0).unwrap();
        assert!(f.abs() < 1e-15);
    }

    #[test]
    fn prior_term_vanishes_at_prior_moments() {
        let prior = NaturalParams::isotropic(2, 0.4, 1.5).unwrap();
        let q = GaussianDist::new(prior.clone()).unwrap();
        assert!(prior_term(&q, &prior).unwrap().abs() < 1e-15);
    }

    #[test]
    fn prior_term_matches_finite_differences() {
        let mean = [0.3, -1.2];
        let q = GaussianDist::from_mean_var(&[0.8, 0.1], &[0.4, 2.0]).unwrap();
        let s0 = 0.25;
        let kl_at = |s: f64| {
            let e = Hyperparams::new().with(PRIOR_LOG_VARIANCE, s);
            let p = GaussianDist::new(prior_from_hyper(&mean, &e).unwrap()).unwrap();
            -q.kl(&p).unwrap()
        };
        let h = 1e-5;
        let fd = (kl_at(s0 + h) - kl_at(s0 - h)) / (2.0 * h);
        let e = Hyperparams::new().with(PRIOR_LOG_VARIANCE, s0);
        let got = prior_term(&q, &prior_from_hyper(&mean, &e).unwrap()).unwrap();
        assert!((got - fd).abs() < 1e-6 * fd.abs().max(1.0), "{got} vs {fd}");
    }
}
