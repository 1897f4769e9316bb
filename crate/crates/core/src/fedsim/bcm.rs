use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{GaussianDist, NaturalParams};
use crate::models::{Hyperparams, ModelKind};
use crate::pvi::{global_vi, RunCfg};

use super::partition::DataShard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcmMode {
    /// Every worker uses the full prior; the combination divides out `K-1` copies.
    Same,
    /// Worker `k` uses the prior raised to `N_k / N`; the posteriors are multiplied.
    Split,
}

impl BcmMode {
    fn name(self) -> &'static str {
        match self {
            BcmMode::Same => "same",
            BcmMode::Split => "split",
        }
    }
}

/// Combine independently trained sub-posteriors.
///
/// `Same`: `Σ_k η_k - (K-1) η_0`. `Split`: `Σ_k η_k`.
pub fn bcm_combine(
    subs: &[NaturalParams],
    prior: &NaturalParams,
    mode: BcmMode,
) -> Result<GaussianDist> {
    let dim = prior.dim();
    let mut e1 = vec![0.0; dim];
    let mut e2 = vec![0.0; dim];
    for s in subs {
        if s.dim() != dim {
            return Err(PviError::DimensionMismatch {
                expected: dim,
                found: s.dim(),
            });
        }
        for d in 0..dim {
            e1[d] += s.eta1()[d];
            e2[d] += s.eta2()[d];
        }
    }
    if mode == BcmMode::Same {
        let extra = subs.len() as f64 - 1.0;
        for d in 0..dim {
            e1[d] -= extra * prior.eta1()[d];
            e2[d] -= extra * prior.eta2()[d];
        }
    }
    let eta = NaturalParams::new(e1, e2)?;
    if let Some((index, eta2)) = eta.first_improper() {
        return Err(PviError::ImproperCombination {
            mode: mode.name(),
            index,
            eta2,
        });
    }
    GaussianDist::new(eta)
}

/// Train one global-VI posterior per shard and combine them.
///
/// In `Split` mode an empty shard contributes nothing; in `Same` mode it
/// contributes the prior itself.
pub fn run_bcm(
    shards: &[DataShard],
    prior: &NaturalParams,
    model: &ModelKind,
    eps: &Hyperparams,
    mode: BcmMode,
    sweeps: usize,
    cfg: &RunCfg,
) -> Result<GaussianDist> {
    let total: usize = shards.iter().map(|s| s.data.len()).sum();
    let mut subs = Vec::with_capacity(shards.len());
    for s in shards {
        let local_prior = match mode {
            BcmMode::Same => prior.clone(),
            BcmMode::Split => {
                if s.data.is_empty() {
                    subs.push(NaturalParams::zeros(prior.dim()));
                    continue;
                }
                prior.scale(s.data.len() as f64 / total as f64)
            }
        };
        let run_cfg = RunCfg {
            seed: crate::seed::derive(cfg.seed, &[s.index as u64]),
            ..cfg.clone()
        };
        let out = global_vi(&local_prior, &s.data, model, eps, sweeps, &run_cfg)?;
        subs.push(out.state.posterior().clone());
    }
    bcm_combine(&subs, prior, mode)
}
