//! Deterministic simulation of federated PVI.
//!
//! A parameter server owns the posterior; simulated workers each hold one
//! data shard, fetch the posterior, refine their site locally and send back
//! a delta. Three communication patterns are provided (one sequential pass,
//! synchronous rounds, asynchronous lock-free updates driven by a
//! discrete-event queue) along with Bayesian-committee-machine baselines.

mod bcm;
mod eval;
mod partition;
mod server;
mod strategies;

pub use bcm::{bcm_combine, run_bcm, BcmMode};
pub use eval::{evaluate, EvalCfg, Evaluation};
pub use partition::{partition, to_shards, DataShard, PartitionMode, PartitionSpec};
pub use server::{Counters, ServerState, SiteDelta};
pub use strategies::{
    run_asynchronous, run_sequential, run_synchronous, write_metrics_csv, AsyncCfg,
    DurationModel, MetricsRow, Problem, SimCfg, SimOutcome, WorkerCfg, WorkerTiming,
};
