use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{GaussianDist, NaturalParams};
use crate::models::Hyperparams;

pub type ShardId = usize;

/// Approximate likelihood `t_m` of one shard.
///
/// `natural` may be improper. `log_scale` is the log of the factor's constant
/// multiplier; it is what makes the local free energies of all shards add up
/// to the global one (see [`crate::pvi::local_free_energy`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFactor {
    pub shard_id: ShardId,
    pub natural: NaturalParams,
    #[serde(default)]
    pub log_scale: f64,
}

impl SiteFactor {
    pub fn zero(shard_id: ShardId, dim: usize) -> Self {
        SiteFactor {
            shard_id,
            natural: NaturalParams::zeros(dim),
            log_scale: 0.0,
        }
    }
}

/// Prior, sites and the cached posterior `η_q = η_0 + Σ_m η_m`.
///
/// The cache is always rebuilt by the same ordered sum over the prior and
/// the sites in ascending shard order, so it is bit-identical to a fresh
/// recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    prior: NaturalParams,
    sites: BTreeMap<ShardId, SiteFactor>,
    posterior: GaussianDist,
}

/// Ordered sum `prior + Σ sites`.
pub fn sum_sites<'a>(
    prior: &NaturalParams,
    sites: impl IntoIterator<Item = &'a NaturalParams>,
) -> Result<NaturalParams> {
    let mut e1 = prior.eta1().to_vec();
    let mut e2 = prior.eta2().to_vec();
    for s in sites {
        if s.dim() != prior.dim() {
            return Err(PviError::DimensionMismatch {
                expected: prior.dim(),
                found: s.dim(),
            });
        }
        for (a, b) in e1.iter_mut().zip(s.eta1()) {
            *a += b;
        }
        for (a, b) in e2.iter_mut().zip(s.eta2()) {
            *a += b;
        }
    }
    NaturalParams::new(e1, e2)
}

impl PosteriorState {
    pub fn init(prior: NaturalParams, shard_ids: &[ShardId]) -> Result<Self> {
        prior.check_normalizable()?;
        let dim = prior.dim();
        let mut sites = BTreeMap::new();
        for &id in shard_ids {
            if sites.insert(id, SiteFactor::zero(id, dim)).is_some() {
                return Err(PviError::DuplicateShard(id));
            }
        }
        Self::assemble(prior, sites)
    }

    /// Rebuild from parts, e.g. a checkpoint.
    pub fn from_parts(prior: NaturalParams, site_list: Vec<SiteFactor>) -> Result<Self> {
        prior.check_normalizable()?;
        let mut sites = BTreeMap::new();
        for s in site_list {
            let id = s.shard_id;
            if sites.insert(id, s).is_some() {
                return Err(PviError::DuplicateShard(id));
            }
        }
        Self::assemble(prior, sites)
    }

    fn assemble(prior: NaturalParams, sites: BTreeMap<ShardId, SiteFactor>) -> Result<Self> {
        let eta = sum_sites(&prior, sites.values().map(|s| &s.natural))?;
        let posterior = GaussianDist::new(eta)?;
        Ok(PosteriorState {
            prior,
            sites,
            posterior,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &NaturalParams {
        &self.prior
    }

    pub fn q(&self) -> &GaussianDist {
        &self.posterior
    }

    pub fn posterior(&self) -> &NaturalParams {
        self.posterior.natural()
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteFactor> {
        self.sites.values()
    }

    pub fn shard_ids(&self) -> Vec<ShardId> {
        self.sites.keys().copied().collect()
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn site(&self, id: ShardId) -> Result<&SiteFactor> {
        self.sites.get(&id).ok_or(PviError::UnknownShard(id))
    }

    /// `q / t_id`, which must be normalizable.
    pub fn cavity(&self, id: ShardId) -> Result<NaturalParams> {
        let site = self.site(id)?;
        let cav = self.posterior().divide(&site.natural)?;
        match cav.first_improper() {
            None => Ok(cav),
            Some((index, eta2)) => Err(PviError::ImproperCavity {
                shard: id,
                index,
                eta2,
            }),
        }
    }

    /// Replace one site's natural parameters. The site's log-scale absorbs
    /// the change in log-partition of the posterior so that
    /// `Σ_m c_m = A(η_0) - A(η_q)` keeps holding.
    pub fn with_site(&self, id: ShardId, natural: NaturalParams) -> Result<PosteriorState> {
        self.with_sites(vec![(id, natural)])
    }

    /// Replace several sites at once; the posterior is rebuilt once.
    pub fn with_sites(&self, updates: Vec<(ShardId, NaturalParams)>) -> Result<PosteriorState> {
        let mut sites = self.sites.clone();
        for (id, natural) in &updates {
            let s = sites.get_mut(id).ok_or(PviError::UnknownShard(*id))?;
            if natural.dim() != self.dim() {
                return Err(PviError::DimensionMismatch {
                    expected: self.dim(),
                    found: natural.dim(),
                });
            }
            s.natural = natural.clone();
        }
        let eta = sum_sites(&self.prior, sites.values().map(|s| &s.natural))?;
        let posterior = GaussianDist::new(eta)?;
        let shift = self.posterior.log_partition() - posterior.log_partition();
        if let Some((id, _)) = updates.first() {
            sites.get_mut(id).expect("checked above").log_scale += shift;
        }
        Ok(PosteriorState {
            prior: self.prior.clone(),
            sites,
            posterior,
        })
    }

    /// Swap in a new prior, e.g. after a hyperparameter step. The change in
    /// log-partition bookkeeping is spread evenly across the sites.
    pub fn with_prior(&self, prior: NaturalParams) -> Result<PosteriorState> {
        prior.check_normalizable()?;
        if prior.dim() != self.dim() {
            return Err(PviError::DimensionMismatch {
                expected: self.dim(),
                found: prior.dim(),
            });
        }
        let eta = sum_sites(&prior, self.sites.values().map(|s| &s.natural))?;
        let posterior = GaussianDist::new(eta)?;
        let mut sites = self.sites.clone();
        if !sites.is_empty() {
            let want = prior.log_partition()? - posterior.log_partition();
            let have: f64 = sites.values().map(|s| s.log_scale).sum();
            let share = (want - have) / sites.len() as f64;
            for s in sites.values_mut() {
                s.log_scale += share;
            }
        }
        Ok(PosteriorState {
            prior,
            sites,
            posterior,
        })
    }

    /// True when the cached posterior is bit-identical to a fresh sum.
    pub fn is_consistent(&self) -> bool {
        match sum_sites(&self.prior, self.sites.values().map(|s| &s.natural)) {
            Ok(eta) => {
                let cached = self.posterior();
                eta.eta1()
                    .iter()
                    .zip(cached.eta1())
                    .chain(eta.eta2().iter().zip(cached.eta2()))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            }
            Err(_) => false,
        }
    }

    pub fn log_scale_sum(&self) -> f64 {
        self.sites.values().map(|s| s.log_scale).sum()
    }

    pub fn to_checkpoint(&self, hyper: &Hyperparams) -> Checkpoint {
        Checkpoint {
            prior: self.prior.clone(),
            sites: self.sites.values().cloned().collect(),
            hyper: hyper.clone(),
        }
    }
}

/// Serialized run state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub prior: NaturalParams,
    pub sites: Vec<SiteFactor>,
    pub hyper: Hyperparams,
}

impl Checkpoint {
    pub fn into_state(self) -> Result<(PosteriorState, Hyperparams)> {
        Ok((PosteriorState::from_parts(self.prior, self.sites)?, self.hyper))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PviError::Data(e.to_string()))
    }
}
