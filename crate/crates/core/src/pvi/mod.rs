//! Partitioned variational inference.
//!
//! The posterior is `q(θ) = p(θ) Π_m t_m(θ)`: a prior times one approximate
//! likelihood (site) per data shard, all diagonal Gaussians in natural
//! parameters. Refining shard `m` maximizes its local free energy against
//! the cavity `q / t_m` and writes the result back as a new site.

mod free_energy;
mod refine;
mod run;
mod state;

pub use free_energy::{
    global_free_energy, global_free_energy_at, hyper_gradient, local_free_energy,
    local_free_energy_at, prior_from_hyper, prior_term, Shards,
};
pub use refine::{
    linear_regression_mean_field, mirror_step, parallel_fixed_point_step, refine,
    refine_analytic, refine_fixed_point, refine_gradient, stochastic_global_step,
    LocalOptimizerCfg, Strategy, TraceRow,
};
pub use run::{global_vi, run, write_trace_csv, HyperLearning, RunCfg, RunOutcome, Schedule};
pub use state::{sum_sites, Checkpoint, PosteriorState, ShardId, SiteFactor};
