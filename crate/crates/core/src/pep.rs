//! Power EP and stochastic power EP steps for diagonal-Gaussian sites.
//!
//! Both build the tilted distribution `q(θ) (p(y|θ) / t(θ))^α`, project it
//! onto the Gaussian family by moment matching, and move the posterior a
//! fraction `ρ/α` (or `Nρ/α` for the shared-site variant) of the way there
//! in natural parameters. As `α → 0` these reduce to the damped fixed-point
//! updates of PVI and to stochastic natural-gradient global VI.

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{self, GaussianDist, MeanParams, NaturalParams};
use crate::models::{self, Dataset, Hyperparams, ModelKind};
use crate::pvi::{PosteriorState, ShardId};
use crate::quadrature::{GaussHermite, DEFAULT_NODES};
use crate::tolerance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TiltMethod {
    /// Gauss–Hermite quadrature under `q`; one-dimensional posteriors only.
    #[serde(rename = "quadrature_1d")]
    Quadrature1D { nodes: usize },
    /// Self-normalized importance sampling with proposals drawn from `q`.
    MonteCarlo { samples: usize },
}

impl Default for TiltMethod {
    fn default() -> Self {
        TiltMethod::Quadrature1D {
            nodes: DEFAULT_NODES,
        }
    }
}

/// Normalizer and sufficient-statistic moments of a tilted distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedMoments {
    /// `log Ẑ = log E_q[exp(α h(θ))]`.
    pub log_normalizer: f64,
    pub mean_params: MeanParams,
    /// Effective sample size of the importance weights (`None` for quadrature).
    pub ess: Option<f64>,
}

impl TiltedMoments {
    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }
}

/// Moments of `q(θ) exp(α h(θ)) / Ẑ`.
pub fn tilted_moments<H>(
    q: &GaussianDist,
    log_ratio: H,
    alpha: f64,
    method: TiltMethod,
    seed: u64,
) -> Result<TiltedMoments>
where
    H: Fn(&[f64]) -> Result<f64>,
{
    let dim = q.dim();
    let (points, base_logw): (Vec<Vec<f64>>, Vec<f64>) = match method {
        TiltMethod::Quadrature1D { nodes } => {
            if dim != 1 {
                return Err(PviError::InvalidArgument(format!(
                    "quadrature tilting needs a one-dimensional posterior, got {dim}"
                )));
            }
            if nodes == 0 {
                return Err(PviError::InvalidArgument("quadrature needs >= 1 node".into()));
            }
            let gh = GaussHermite::new(nodes);
            let (m, sd) = (q.mean()[0], q.variance()[0].sqrt());
            gh.standard_normal()
                .map(|(z, p)| (vec![m + sd * z], p.ln()))
                .unzip()
        }
        TiltMethod::MonteCarlo { samples } => {
            let draws = expfam::sample(q, samples, seed)?;
            let lw = -(samples as f64).ln();
            let n = draws.len();
            (draws, vec![lw; n])
        }
    };
    let mut logw = Vec::with_capacity(points.len());
    for (theta, b) in points.iter().zip(&base_logw) {
        let h = log_ratio(theta)?;
        let lw = b + alpha * h;
        if lw.is_nan() {
            return Err(PviError::NonFinite {
                context: "tilted weight",
                row: None,
            });
        }
        logw.push(lw);
    }
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(PviError::NonFinite {
            context: "tilted normalizer",
            row: None,
        });
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let log_normalizer = top + total.ln();

    let ess = match method {
        TiltMethod::MonteCarlo { .. } => {
            let sq: f64 = w.iter().map(|x| x * x).sum();
            let ess = total * total / sq;
            let min = tolerance::DEFAULT.min_ess;
            if !(ess >= min) {
                return Err(PviError::UnreliableMoments { ess, min });
            }
            Some(ess)
        }
        TiltMethod::Quadrature1D { .. } => None,
    };

    let mut mu1 = vec![0.0; dim];
    let mut mu2 = vec![0.0; dim];
    for (theta, wi) in points.iter().zip(&w) {
        let p = wi / total;
        for d in 0..dim {
            mu1[d] += p * theta[d];
            mu2[d] += p * theta[d] * theta[d];
        }
    }
    let mean_params = MeanParams::new(mu1, mu2)?;
    Ok(TiltedMoments {
        log_normalizer,
        mean_params,
        ess,
    })
}

/// `log p(y|θ) - η_t · T(θ)` for site `t`.
pub fn site_log_ratio<'a>(
    model: &'a ModelKind,
    data: &'a Dataset,
    eps: &'a Hyperparams,
    site: &'a NaturalParams,
) -> impl Fn(&[f64]) -> Result<f64> + 'a {
    move |theta: &[f64]| {
        let ll = models::log_lik_point(model, theta, data, eps)?;
        let t: f64 = site
            .iter()
            .zip(theta)
            .map(|((e1, e2), x)| e1 * x + e2 * x * x)
            .sum();
        Ok(ll - t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PepCfg {
    pub alpha: f64,
    pub rho: f64,
    pub method: TiltMethod,
    /// Permit a step fraction above one (`ρ > α`, or `Nρ > α` for the
    /// shared-site variant), where `q_old` enters with a negative power.
    #[serde(default)]
    pub allow_overshoot: bool,
}

impl PepCfg {
    pub fn new(alpha: f64, rho: f64) -> Self {
        PepCfg {
            alpha,
            rho,
            method: TiltMethod::default(),
            allow_overshoot: false,
        }
    }

    fn check(&self, scale: f64) -> Result<f64> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(PviError::InvalidArgument(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(PviError::InvalidArgument(format!(
                "rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        let frac = scale * self.rho / self.alpha;
        if frac > 1.0 && !self.allow_overshoot {
            return Err(PviError::InvalidArgument(format!(
                "step fraction {frac} exceeds 1; set allow_overshoot to permit it"
            )));
        }
        Ok(frac)
    }
}

/// `η_old + frac · (η_α - η_old)`, i.e. `q_old^{1-frac} q_α^{frac}`.
fn geometric_step(old: &NaturalParams, target: &NaturalParams, frac: f64) -> Result<NaturalParams> {
    let e1 = old
        .eta1()
        .iter()
        .zip(target.eta1())
        .map(|(a, b)| a + frac * (b - a))
        .collect();
    let e2 = old
        .eta2()
        .iter()
        .zip(target.eta2())
        .map(|(a, b)| a + frac * (b - a))
        .collect();
    let out = NaturalParams::new(e1, e2)?;
    out.check_normalizable()?;
    Ok(out)
}

/// One power-EP step on shard `id`.
pub fn pep_step(
    state: &PosteriorState,
    id: ShardId,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    cfg: &PepCfg,
    seed: u64,
) -> Result<PosteriorState> {
    let frac = cfg.check(1.0)?;
    state.cavity(id)?;
    let site = &state.site(id)?.natural;
    let tm = tilted_moments(
        state.q(),
        site_log_ratio(model, data, eps, site),
        cfg.alpha,
        cfg.method,
        seed,
    )?;
    let eta_alpha = tm.mean_params.to_natural()?;
    let eta_old = state.posterior();
    let eta_new = geometric_step(eta_old, &eta_alpha, frac)?;
    let new_site = site.multiply(&eta_new.divide(eta_old)?)?;
    state.with_site(id, new_site)
}

/// Posterior `p(θ) t(θ)^N` with a single site shared by `N` data groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSiteState {
    prior: NaturalParams,
    site: NaturalParams,
    n_total: usize,
    posterior: GaussianDist,
}

impl SharedSiteState {
    pub fn init(prior: NaturalParams, n_total: usize) -> Result<Self> {
        let site = NaturalParams::zeros(prior.dim());
        Self::from_site(prior, site, n_total)
    }

    pub fn from_site(prior: NaturalParams, site: NaturalParams, n_total: usize) -> Result<Self> {
        if n_total == 0 {
            return Err(PviError::InvalidArgument("n_total must be >= 1".into()));
        }
        prior.check_normalizable()?;
        let posterior = GaussianDist::new(prior.multiply(&site.scale(n_total as f64))?)?;
        Ok(SharedSiteState {
            prior,
            site,
            n_total,
            posterior,
        })
    }

    pub fn prior(&self) -> &NaturalParams {
        &self.prior
    }

    pub fn site(&self) -> &NaturalParams {
        &self.site
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn q(&self) -> &GaussianDist {
        &self.posterior
    }

    pub fn posterior(&self) -> &NaturalParams {
        self.posterior.natural()
    }
}

/// One stochastic power-EP step on the data group `data`: the posterior
/// moves `Nρ/α` of the way to the projected tilted distribution and the
/// shared site becomes `(q_new / p)^{1/N}`.
pub fn spep_step(
    state: &SharedSiteState,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    cfg: &PepCfg,
    seed: u64,
) -> Result<SharedSiteState> {
    let n = state.n_total as f64;
    let frac = cfg.check(n)?;
    let tm = tilted_moments(
        state.q(),
        site_log_ratio(model, data, eps, &state.site),
        cfg.alpha,
        cfg.method,
        seed,
    )?;
    let eta_alpha = tm.mean_params.to_natural()?;
    let eta_new = geometric_step(state.posterior(), &eta_alpha, frac)?;
    let site = eta_new.divide(&state.prior)?.scale(1.0 / n);
    SharedSiteState::from_site(state.prior.clone(), site, state.n_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Row, OBS_LOG_VARIANCE};
    use crate::pvi::{refine_fixed_point, LocalOptimizerCfg};

    fn eps0() -> Hyperparams {
        Hyperparams::new().with(OBS_LOG_VARIANCE, 0.0)
    }

    fn n01() -> NaturalParams {
        NaturalParams::isotropic(1, 0.0, 1.0).unwrap()
    }

    #[test]
    fn zero_ratio_gives_the_moments_of_q() {
        let q = GaussianDist::from_mean_var(&[0.7], &[0.3]).unwrap();
        let tm = tilted_moments(&q, |_| Ok(0.0), 0.5, TiltMethod::default(), 0).unwrap();
        assert!(tm.log_normalizer.abs() < 1e-13);
        assert!((tm.mean_params.mu1[0] - 0.7).abs() < 1e-13);
        assert!((tm.mean_params.mu2[0] - (0.3 + 0.49)).abs() < 1e-13);
    }

    #[test]
    fn gaussian_tilt_matches_closed_form() {
        // q = N(0.5, 2), h(θ) = log N(y=1; θ, 1). Tilted is Gaussian with
        // precision 1/2 + α and mean (0.25 + α) / (0.5 + α).
        let q = GaussianDist::from_mean_var(&[0.5], &[2.0]).unwrap();
        let data = Dataset::from_targets(&[1.0]);
        let zero = NaturalParams::zeros(1);
        let eps = eps0();
        for alpha in [0.1, 0.5, 1.0] {
            let h = site_log_ratio(&ModelKind::GaussianMean, &data, &eps, &zero);
            let tm = tilted_moments(&q, h, alpha, TiltMethod::default(), 0).unwrap();
            let prec = 0.5 + alpha;
            let mean = (0.25 + alpha) / prec;
            let got = tm.mean_params.to_natural().unwrap();
            let (m, v) = got.mean_var().unwrap();
            assert!((m[0] - mean).abs() < 1e-8);
            assert!((v[0] - 1.0 / prec).abs() < 1e-8);
        }
    }

    #[test]
    fn monte_carlo_reports_low_ess() {
        let q = GaussianDist::from_mean_var(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let sharp = |t: &[f64]| Ok(-1e4 * (t[0] - 3.0).powi(2));
        let err = tilted_moments(&q, sharp, 1.0, TiltMethod::MonteCarlo { samples: 200 }, 1);
        assert!(matches!(err, Err(PviError::UnreliableMoments { .. })));
        assert!(
            tilted_moments(&q, sharp, 1.0, TiltMethod::Quadrature1D { nodes: 61 }, 1).is_err()
        );
    }

    #[test]
    fn full_power_step_is_exact_for_a_conjugate_model() {
        let s = PosteriorState::init(n01(), &[0]).unwrap();
        let data = Dataset::from_targets(&[2.0]);
        let next = pep_step(&s, 0, &data, &ModelKind::GaussianMean, &eps0(), &PepCfg::new(1.0, 1.0), 0)
            .unwrap();
        let (m, v) = next.posterior().mean_var().unwrap();
        assert!((m[0] - 1.0).abs() < 1e-10 && (v[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn overshoot_needs_the_flag() {
        let s = PosteriorState::init(n01(), &[0]).unwrap();
        let data = Dataset::from_targets(&[2.0]);
        let cfg = PepCfg::new(0.1, 0.5);
        assert!(pep_step(&s, 0, &data, &ModelKind::GaussianMean, &eps0(), &cfg, 0).is_err());
        let cfg = PepCfg {
            allow_overshoot: true,
            ..cfg
        };
        assert!(pep_step(&s, 0, &data, &ModelKind::GaussianMean, &eps0(), &cfg, 0).is_ok());
    }

    #[test]
    fn small_alpha_approaches_the_fixed_point_step() {
        let rows = vec![
            Row::new(vec![1.0], 1.0),
            Row::new(vec![-0.5], 0.0),
            Row::new(vec![2.0], 1.0),
        ];
        let data = Dataset::new(rows).unwrap();
        let model = ModelKind::logistic_quadrature(DEFAULT_NODES);
        let eps = Hyperparams::new();
        let s = PosteriorState::init(NaturalParams::isotropic(1, 0.2, 1.5).unwrap(), &[0]).unwrap();
        let rho = 0.5;
        let (fp, _) =
            refine_fixed_point(&s, 0, &data, &model, &eps, &LocalOptimizerCfg::fixed_point(rho, 1), 0)
                .unwrap();
        let gap = |alpha: f64| {
            let cfg = PepCfg {
                allow_overshoot: true,
                ..PepCfg::new(alpha, rho)
            };
            let p = pep_step(&s, 0, &data, &model, &eps, &cfg, 0).unwrap();
            p.posterior().linf_distance(fp.posterior())
        };
        let (g1, g2, g3) = (gap(1e-2), gap(5e-3), gap(2.5e-3));
        assert!(g2 <= 0.6 * g1 && g3 <= 0.6 * g2, "{g1} {g2} {g3}");
    }

    #[test]
    fn one_group_spep_is_pep() {
        let data = Dataset::from_targets(&[2.0, 0.5]);
        let cfg = PepCfg::new(0.5, 0.25);
        let shared = SharedSiteState::init(n01(), 1).unwrap();
        let a = spep_step(&shared, &data, &ModelKind::GaussianMean, &eps0(), &cfg, 0).unwrap();
        let s = PosteriorState::init(n01(), &[0]).unwrap();
        let b = pep_step(&s, 0, &data, &ModelKind::GaussianMean, &eps0(), &cfg, 0).unwrap();
        assert!(a.posterior().linf_distance(b.posterior()) < 1e-12);
    }

    #[test]
    fn spep_on_empty_data_keeps_a_fresh_posterior() {
        let shared = SharedSiteState::init(n01(), 4).unwrap();
        let cfg = PepCfg::new(0.5, 0.1);
        let next = spep_step(&shared, &Dataset::empty(), &ModelKind::GaussianMean, &eps0(), &cfg, 0)
            .unwrap();
        assert!(next.posterior().linf_distance(shared.posterior()) < 1e-12);
    }
}
