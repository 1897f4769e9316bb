use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::NaturalParams;
use crate::models::{Dataset, Hyperparams, ModelKind, PRIOR_LOG_VARIANCE};
use crate::seed;

use super::free_energy::{global_free_energy, hyper_gradient, prior_from_hyper, Shards};
use super::refine::{refine, LocalOptimizerCfg, TraceRow};
use super::state::{PosteriorState, ShardId};

/// Order in which shards are refined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    RoundRobin { sweeps: usize },
    /// A fresh seeded permutation of the shards on every sweep.
    Random { sweeps: usize, seed: u64 },
    Custom { order: Vec<ShardId> },
}

impl Schedule {
    pub fn visits(&self, shard_ids: &[ShardId]) -> Vec<ShardId> {
        match self {
            Schedule::RoundRobin { sweeps } => (0..*sweeps)
                .flat_map(|_| shard_ids.iter().copied())
                .collect(),
            Schedule::Random { sweeps, seed: s } => {
                let mut out = Vec::with_capacity(sweeps * shard_ids.len());
                for sweep in 0..*sweeps {
                    let mut ids = shard_ids.to_vec();
                    ids.shuffle(&mut seed::rng(*s, &[sweep as u64]));
                    out.extend(ids);
                }
                out
            }
            Schedule::Custom { order } => order.clone(),
        }
    }
}

/// Coordinate-ascent hyperparameter learning: after every full sweep the
/// hyperparameters take `steps_per_sweep` gradient steps with `q` held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperLearning {
    pub step_size: f64,
    #[serde(default = "one")]
    pub steps_per_sweep: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunCfg {
    pub optimizer: LocalOptimizerCfg,
    /// Cap on the number of visits; `None` runs the whole schedule.
    pub max_iterations: Option<usize>,
    /// Stop once the latest site change of every shard is below this.
    pub tolerance: f64,
    pub record_global_fe: bool,
    /// Use the same Monte-Carlo seed on every visit instead of a fresh one.
    pub common_random_numbers: bool,
    pub seed: u64,
    pub hyper: Option<HyperLearning>,
}

impl Default for RunCfg {
    fn default() -> Self {
        RunCfg {
            optimizer: LocalOptimizerCfg::default(),
            max_iterations: None,
            tolerance: crate::tolerance::DEFAULT.fixed_point_analytic,
            record_global_fe: false,
            common_random_numbers: false,
            seed: 0,
            hyper: None,
        }
    }
}

impl RunCfg {
    /// Seed handed to the models on visit `iteration`.
    pub fn visit_seed(&self, iteration: usize) -> u64 {
        if self.common_random_numbers {
            self.seed
        } else {
            seed::derive(self.seed, &[iteration as u64])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: PosteriorState,
    pub eps: Hyperparams,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

fn with_iteration(e: PviError, iteration: usize) -> PviError {
    match e {
        PviError::Divergence { shard, reason, .. } => PviError::Divergence {
            shard,
            iteration,
            reason,
        },
        other => other,
    }
}

/// Refine shards in schedule order until the schedule is exhausted, the
/// iteration cap is hit, or every site has stopped moving.
pub fn run(
    state: &PosteriorState,
    shards: &Shards,
    model: &ModelKind,
    eps: &Hyperparams,
    schedule: &Schedule,
    cfg: &RunCfg,
) -> Result<RunOutcome> {
    cfg.optimizer.validate()?;
    model.validate()?;
    let ids = state.shard_ids();
    for id in &ids {
        if !shards.contains_key(id) {
            return Err(PviError::UnknownShard(*id));
        }
    }
    let visits = schedule.visits(&ids);
    if let Some(bad) = visits.iter().find(|id| !shards.contains_key(id)) {
        return Err(PviError::UnknownShard(*bad));
    }
    let mut cur = state.clone();
    let mut eps = eps.clone();
    let mut trace = Vec::new();
    let mut last_delta: BTreeMap<ShardId, f64> = ids.iter().map(|&id| (id, f64::INFINITY)).collect();
    let mut hyper_moved = f64::INFINITY;
    let mut converged = false;
    let limit = cfg.max_iterations.unwrap_or(usize::MAX);

    for (k, &id) in visits.iter().enumerate().take(limit) {
        let iteration = k + 1;
        let s = cfg.visit_seed(iteration);
        let (next, mut row) = refine(&cur, id, &shards[&id], model, &eps, &cfg.optimizer, s)
            .map_err(|e| with_iteration(e, iteration))?;
        cur = next;
        row.iteration = iteration;
        if cfg.record_global_fe {
            row.global_free_energy = Some(global_free_energy(&cur, shards, model, &eps, s)?);
        }
        last_delta.insert(id, row.site_delta_norm);
        trace.push(row);

        if let Some(h) = cfg.hyper {
            if !ids.is_empty() && iteration % ids.len() == 0 {
                let (next, moved) = hyper_steps(&cur, shards, model, &eps, &h, s)?;
                cur = next.0;
                eps = next.1;
                hyper_moved = moved;
            }
        }
        let sites_done = last_delta.values().all(|d| *d < cfg.tolerance);
        let hyper_done = cfg.hyper.is_none() || hyper_moved < cfg.tolerance;
        if sites_done && hyper_done {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        state: cur,
        eps,
        trace,
        converged,
    })
}

type StateAndHyper = (PosteriorState, Hyperparams);

fn hyper_steps(
    state: &PosteriorState,
    shards: &Shards,
    model: &ModelKind,
    eps: &Hyperparams,
    h: &HyperLearning,
    seed: u64,
) -> Result<(StateAndHyper, f64)> {
    let mut cur = state.clone();
    let mut eps = eps.clone();
    let mut moved: f64 = 0.0;
    let prior_mean = cur.q_prior_mean()?;
    for _ in 0..h.steps_per_sweep {
        let g = hyper_gradient(&cur, shards, model, &eps, seed)?;
        let next = eps.ascend(&g, h.step_size);
        for (k, v) in &g.0 {
            moved = moved.max((h.step_size * v).abs());
            if !next.get(k).is_some_and(f64::is_finite) {
                return Err(PviError::NonFinite {
                    context: "hyperparameter step",
                    row: None,
                });
            }
        }
        eps = next;
        if eps.get(PRIOR_LOG_VARIANCE).is_some() {
            cur = cur.with_prior(prior_from_hyper(&prior_mean, &eps)?)?;
        }
    }
    Ok(((cur, eps), moved))
}

impl PosteriorState {
    fn q_prior_mean(&self) -> Result<Vec<f64>> {
        Ok(self.prior().mean_var()?.0)
    }
}

/// Direct global VI: a single shard holding all the data.
pub fn global_vi(
    prior: &NaturalParams,
    data: &Dataset,
    model: &ModelKind,
    eps: &Hyperparams,
    sweeps: usize,
    cfg: &RunCfg,
) -> Result<RunOutcome> {
    let state = PosteriorState::init(prior.clone(), &[0])?;
    let shards: Shards = [(0, data.clone())].into_iter().collect();
    run(&state, &shards, model, eps, &Schedule::RoundRobin { sweeps }, cfg)
}

/// Write trace rows as CSV with header
/// `iter,shard,local_fe,global_fe,delta_norm,hyper_json`.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| PviError::Data(e.to_string());
    w.write_record(["iter", "shard", "local_fe", "global_fe", "delta_norm", "hyper_json"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.shard_id.to_string(),
            r.local_free_energy.to_string(),
            r.global_free_energy.map(|g| g.to_string()).unwrap_or_default(),
            r.site_delta_norm.to_string(),
            r.hyper.to_json(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| PviError::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::OBS_LOG_VARIANCE;

    fn eps0() -> Hyperparams {
        Hyperparams::new().with(OBS_LOG_VARIANCE, 0.0)
    }

    fn three_shards() -> Shards {
        [
            (0, Dataset::from_targets(&[2.0, 1.0])),
            (1, Dataset::from_targets(&[0.5])),
            (2, Dataset::from_targets(&[-1.0, 3.0, 0.0])),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn one_conjugate_sweep_is_exact() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let state = PosteriorState::init(prior, &[0, 1, 2]).unwrap();
        let cfg = RunCfg {
            optimizer: LocalOptimizerCfg::fixed_point(1.0, 1),
            record_global_fe: true,
            ..RunCfg::default()
        };
        let out = run(
            &state,
            &three_shards(),
            &ModelKind::GaussianMean,
            &eps0(),
            &Schedule::RoundRobin { sweeps: 1 },
            &cfg,
        )
        .unwrap();
        // Six observations with unit noise and a N(0,1) prior.
        let want = NaturalParams::new(vec![5.5], vec![-3.5]).unwrap();
        assert!(out.state.posterior().linf_distance(&want) < 1e-12);
        let iters: Vec<usize> = out.trace.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![1, 2, 3]);
    }

    #[test]
    fn empty_schedule_changes_nothing() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let state = PosteriorState::init(prior, &[0, 1, 2]).unwrap();
        let out = run(
            &state,
            &three_shards(),
            &ModelKind::GaussianMean,
            &eps0(),
            &Schedule::Custom { order: vec![] },
            &RunCfg::default(),
        )
        .unwrap();
        assert_eq!(out.state, state);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn convergence_stops_the_run() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let state = PosteriorState::init(prior, &[0, 1, 2]).unwrap();
        let out = run(
            &state,
            &three_shards(),
            &ModelKind::GaussianMean,
            &eps0(),
            &Schedule::RoundRobin { sweeps: 50 },
            &RunCfg::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.trace.len(), 6);
    }

    #[test]
    fn random_schedule_is_a_permutation_per_sweep() {
        let v = Schedule::Random { sweeps: 3, seed: 9 }.visits(&[0, 1, 2, 3]);
        assert_eq!(v.len(), 12);
        for chunk in v.chunks(4) {
            let mut c = chunk.to_vec();
            c.sort();
            assert_eq!(c, vec![0, 1, 2, 3]);
        }
        assert_eq!(v, Schedule::Random { sweeps: 3, seed: 9 }.visits(&[0, 1, 2, 3]));
    }

    #[test]
    fn unknown_shard_in_schedule_is_rejected() {
        let prior = NaturalParams::isotropic(1, 0.0, 1.0).unwrap();
        let state = PosteriorState::init(prior, &[0, 1, 2]).unwrap();
        let err = run(
            &state,
            &three_shards(),
            &ModelKind::GaussianMean,
            &eps0(),
            &Schedule::Custom { order: vec![0, 9] },
            &RunCfg::default(),
        );
        assert_eq!(err, Err(PviError::UnknownShard(9)).map(|_: ()| unreachable!()));
    }

    #[test]
    fn trace_csv_has_the_documented_header() {
        let rows = vec![TraceRow {
            iteration: 1,
            shard_id: 2,
            local_free_energy: -1.5,
            global_free_energy: None,
            site_delta_norm: 0.25,
            hyper: eps0(),
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,shard,local_fe,global_fe,delta_norm,hyper_json"
        );
        assert!(lines.next().unwrap().starts_with("1,2,-1.5,,0.25,"));
    }

    #[test]
    fn learns_the_noise_variance() {
        // Large sample from N(θ, 4): the learned log-variance approaches ln 4.
        let mut rng = seed::rng(5, &[]);
        let ys: Vec<f64> = (0..4000)
            .map(|_| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                1.0 + 2.0 * z
            })
            .collect();
        let shards: Shards = ys
            .chunks(1000)
            .enumerate()
            .map(|(i, c)| (i, Dataset::from_targets(c)))
            .collect();
        let prior = NaturalParams::isotropic(1, 0.0, 10.0).unwrap();
        let state = PosteriorState::init(prior, &[0, 1, 2, 3]).unwrap();
        let cfg = RunCfg {
            optimizer: LocalOptimizerCfg::fixed_point(1.0, 1),
            hyper: Some(HyperLearning {
                step_size: 1e-4,
                steps_per_sweep: 1,
            }),
            tolerance: 1e-6,
            ..RunCfg::default()
        };
        let out = run(
            &state,
            &shards,
            &ModelKind::GaussianMean,
            &eps0(),
            &Schedule::RoundRobin { sweeps: 500 },
            &cfg,
        )
        .unwrap();
        let s = out.eps.get(OBS_LOG_VARIANCE).unwrap();
        let sample_var = {
            let n = ys.len() as f64;
            let m = ys.iter().sum::<f64>() / n;
            ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n
        };
        assert!((s - sample_var.ln()).abs() < 0.01, "{s} vs {}", sample_var.ln());
    }
}
