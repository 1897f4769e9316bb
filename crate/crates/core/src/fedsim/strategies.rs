use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand_distr::{Distribution, Exp, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::NaturalParams;
use crate::models::{Dataset, Hyperparams, ModelKind};
use crate::pvi::{global_free_energy, refine, LocalOptimizerCfg, PosteriorState, Shards, TraceRow};
use crate::seed;

use super::eval::{evaluate, EvalCfg};
use super::partition::{to_shards, DataShard};
use super::server::{ServerState, SiteDelta};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerCfg {
    pub optimizer: LocalOptimizerCfg,
    /// Reuse one Monte-Carlo seed for every local refinement.
    pub common_random_numbers: bool,
    pub seed: u64,
}

impl WorkerCfg {
    fn job_seed(&self, shard: usize, job: usize) -> u64 {
        if self.common_random_numbers {
            self.seed
        } else {
            seed::derive(self.seed, &[shard as u64, job as u64])
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimCfg {
    pub worker: WorkerCfg,
    pub record_global_fe: bool,
    /// Evaluate on the test set after every server update when set.
    pub eval: Option<EvalCfg>,
}

/// Everything the workers and the server share.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub shards: &'a [DataShard],
    pub model: &'a ModelKind,
    pub eps: &'a Hyperparams,
    pub test: Option<&'a Dataset>,
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub event_time: f64,
    pub event_type: &'static str,
    pub worker: Option<usize>,
    pub round: usize,
    pub error: Option<f64>,
    pub nll: Option<f64>,
    pub messages_up: u64,
    pub messages_down: u64,
    pub global_fe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub server: ServerState,
    pub trace: Vec<TraceRow>,
    pub metrics: Vec<MetricsRow>,
}

fn shard_map(p: &Problem) -> Shards {
    to_shards(p.shards)
}

fn worker_update(
    snapshot: &PosteriorState,
    shard: &DataShard,
    p: &Problem,
    cfg: &WorkerCfg,
    job: usize,
) -> Result<(SiteDelta, TraceRow)> {
    let id = shard.index;
    let s = cfg.job_seed(id, job);
    let (next, row) = refine(snapshot, id, &shard.data, p.model, p.eps, &cfg.optimizer, s)?;
    let new_site = next.site(id)?.natural.clone();
    let delta = new_site.divide(&snapshot.site(id)?.natural)?;
    Ok((
        SiteDelta {
            shard_id: id,
            delta,
            new_site,
        },
        row,
    ))
}

fn metrics_row(
    server: &ServerState,
    p: &Problem,
    cfg: &SimCfg,
    shards: &Shards,
    event_type: &'static str,
    worker: Option<usize>,
    round: usize,
) -> Result<MetricsRow> {
    let c = server.counters();
    let (error, nll) = match (cfg.eval, p.test) {
        (Some(e), Some(test)) => {
            let ev = evaluate(server.state().q(), p.model, test, p.eps, &e)?;
            (Some(ev.error), Some(ev.nll))
        }
        _ => (None, None),
    };
    let global_fe = if cfg.record_global_fe {
        Some(global_free_energy(server.state(), shards, p.model, p.eps, cfg.worker.seed)?)
    } else {
        None
    };
    Ok(MetricsRow {
        event_time: c.simulated_time,
        event_type,
        worker,
        round,
        error,
        nll,
        messages_up: c.messages_up,
        messages_down: c.messages_down,
        global_fe,
    })
}

fn check_shards(server: &ServerState, p: &Problem) -> Result<()> {
    let ids = server.state().shard_ids();
    let mut given: Vec<usize> = p.shards.iter().map(|s| s.index).collect();
    given.sort_unstable();
    if ids != given {
        return Err(PviError::InvalidArgument(format!(
            "server sites {ids:?} do not match shard indices {given:?}"
        )));
    }
    Ok(())
}

/// One pass over the shards in index order, each worker refining against
/// the posterior left by the previous one.
pub fn run_sequential(server: ServerState, p: &Problem, cfg: &SimCfg) -> Result<SimOutcome> {
    check_shards(&server, p)?;
    if server
        .state()
        .sites()
        .any(|s| s.natural != NaturalParams::zeros(s.natural.dim()))
    {
        return Err(PviError::InvalidArgument(
            "sequential runs start from fresh sites".into(),
        ));
    }
    let shards = shard_map(p);
    let mut server = server;
    let mut trace = Vec::new();
    let mut metrics = Vec::new();
    let mut order: Vec<&DataShard> = p.shards.iter().collect();
    order.sort_by_key(|s| s.index);
    for (k, shard) in order.into_iter().enumerate() {
        let snapshot = server.broadcast();
        let (delta, mut row) = worker_update(&snapshot, shard, p, &cfg.worker, 0)?;
        server.receive(delta);
        server.flush()?;
        server.set_time((k + 1) as f64);
        row.iteration = k + 1;
        trace.push(row);
        metrics.push(metrics_row(&server, p, cfg, &shards, "update", Some(shard.index), 1)?);
    }
    Ok(SimOutcome {
        server,
        trace,
        metrics,
    })
}

/// Rounds in which every worker refines from the same broadcast posterior;
/// the server then applies all deltas, damped, in shard order.
pub fn run_synchronous(
    server: ServerState,
    p: &Problem,
    rounds: usize,
    cfg: &SimCfg,
) -> Result<SimOutcome> {
    check_shards(&server, p)?;
    if rounds == 0 {
        return Err(PviError::InvalidArgument("rounds must be >= 1".into()));
    }
    let shards = shard_map(p);
    let mut server = server;
    let mut trace = Vec::new();
    let mut metrics = Vec::new();
    let mut order: Vec<&DataShard> = p.shards.iter().collect();
    order.sort_by_key(|s| s.index);
    let k = order.len();
    for round in 1..=rounds {
        let snapshot = server.state().clone();
        let rejected_before = server.counters().rejected;
        for _ in 0..k {
            server.broadcast();
        }
        let results: Vec<Result<(SiteDelta, TraceRow)>> = order
            .par_iter()
            .map(|s| worker_update(&snapshot, s, p, &cfg.worker, round - 1))
            .collect();
        let mut failed = 0;
        for (j, r) in results.into_iter().enumerate() {
            match r {
                Ok((delta, mut row)) => {
                    server.receive(delta);
                    row.iteration = (round - 1) * k + j + 1;
                    trace.push(row);
                }
                Err(e) if e.is_divergence() => failed += 1,
                Err(e) => return Err(e),
            }
        }
        for _ in 0..failed {
            server.count_rejected();
        }
        let applied = server.flush()?;
        if k > 0 && applied == 0 && server.counters().rejected > rejected_before {
            return Err(PviError::AllDeltasRejected { round });
        }
        server.set_time(round as f64);
        metrics.push(metrics_row(&server, p, cfg, &shards, "round", None, round)?);
    }
    Ok(SimOutcome {
        server,
        trace,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DurationModel {
    Fixed { value: f64 },
    Exponential { mean: f64 },
    Uniform { low: f64, high: f64 },
}

impl DurationModel {
    fn sample(&self, rng: &mut impl rand::Rng) -> Result<f64> {
        let bad = |m: String| PviError::InvalidArgument(m);
        let d = match *self {
            DurationModel::Fixed { value } => value,
            DurationModel::Exponential { mean } => Exp::new(1.0 / mean)
                .map_err(|e| bad(format!("exponential duration: {e}")))?
                .sample(rng),
            DurationModel::Uniform { low, high } => Uniform::new_inclusive(low, high)
                .map_err(|e| bad(format!("uniform duration: {e}")))?
                .sample(rng),
        };
        if d.is_finite() && d >= 0.0 {
            Ok(d)
        } else {
            Err(bad(format!("durations must be finite and >= 0, got {d}")))
        }
    }
}

/// Simulated timing of one worker: first fetch at `start`, each job takes a
/// drawn duration, then the worker idles for `idle` before fetching again.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerTiming {
    #[serde(default)]
    pub start: f64,
    pub duration: DurationModel,
    #[serde(default)]
    pub idle: f64,
}

impl WorkerTiming {
    pub fn fixed(value: f64) -> Self {
        WorkerTiming {
            start: 0.0,
            duration: DurationModel::Fixed { value },
            idle: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsyncCfg {
    /// Simulated wall-clock budget; events after it are not processed.
    pub budget: f64,
    #[serde(default)]
    pub max_updates: Option<usize>,
    #[serde(default)]
    pub scheduler_seed: u64,
    /// One entry shared by all workers, or one per worker in shard order.
    pub timing: Vec<WorkerTiming>,
}

impl AsyncCfg {
    /// Timings under which workers run strictly one at a time, in shard
    /// order, `sweeps` times over.
    pub fn serialized(k: usize, sweeps: usize) -> Self {
        let timing = (0..k)
            .map(|w| WorkerTiming {
                start: w as f64,
                duration: DurationModel::Fixed { value: 0.5 },
                idle: k as f64 - 0.5,
            })
            .collect();
        AsyncCfg {
            budget: (k * sweeps) as f64,
            max_updates: Some(k * sweeps),
            scheduler_seed: 0,
            timing,
        }
    }

    fn timing_for(&self, w: usize, k: usize) -> Result<WorkerTiming> {
        match self.timing.len() {
            1 => Ok(self.timing[0]),
            n if n == k => Ok(self.timing[w]),
            n => Err(PviError::InvalidArgument(format!(
                "expected 1 or {k} worker timings, got {n}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    time: f64,
    /// Finishes sort before fetches at the same instant.
    fetch: bool,
    worker: usize,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so that BinaryHeap pops the earliest event.
        other
            .time
            .total_cmp(&self.time)
            .then(other.fetch.cmp(&self.fetch))
            .then(other.worker.cmp(&self.worker))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lock-free asynchronous updates as a discrete-event simulation. A worker
/// fetches the posterior, works for a drawn duration, and its delta is
/// applied as soon as it finishes, against whatever the posterior has
/// become in the meantime.
pub fn run_asynchronous(
    server: ServerState,
    p: &Problem,
    acfg: &AsyncCfg,
    cfg: &SimCfg,
) -> Result<SimOutcome> {
    check_shards(&server, p)?;
    let shards = shard_map(p);
    let mut order: Vec<&DataShard> = p.shards.iter().collect();
    order.sort_by_key(|s| s.index);
    let k = order.len();
    let timings = (0..k)
        .map(|w| acfg.timing_for(w, k))
        .collect::<Result<Vec<_>>>()?;
    let mut server = server;
    let mut trace = Vec::new();
    let mut metrics = Vec::new();
    let mut heap = BinaryHeap::new();
    for (w, t) in timings.iter().enumerate() {
        heap.push(Event {
            time: t.start,
            fetch: true,
            worker: w,
        });
    }
    let mut jobs = vec![0usize; k];
    let mut pending: Vec<Option<Result<(SiteDelta, TraceRow)>>> = (0..k).map(|_| None).collect();
    let mut finished = 0usize;
    let mut applied_total = 0usize;
    let cap = acfg.max_updates.unwrap_or(usize::MAX);

    while let Some(ev) = heap.pop() {
        if ev.time > acfg.budget || finished >= cap {
            break;
        }
        let w = ev.worker;
        server.set_time(ev.time);
        if ev.fetch {
            let snapshot = server.broadcast();
            pending[w] = Some(worker_update(&snapshot, order[w], p, &cfg.worker, jobs[w]));
            let mut rng = seed::rng(acfg.scheduler_seed, &[w as u64, jobs[w] as u64]);
            let d = timings[w].duration.sample(&mut rng)?;
            jobs[w] += 1;
            heap.push(Event {
                time: ev.time + d,
                fetch: false,
                worker: w,
            });
        } else {
            finished += 1;
            let event_type = match pending[w].take().expect("finish follows fetch") {
                Ok((delta, mut row)) => {
                    server.receive(delta);
                    if server.flush()? == 1 {
                        applied_total += 1;
                        row.iteration = applied_total;
                        trace.push(row);
                        "update"
                    } else {
                        "rejected"
                    }
                }
                Err(e) if e.is_divergence() => {
                    server.count_rejected();
                    "rejected"
                }
                Err(e) => return Err(e),
            };
            metrics.push(metrics_row(&server, p, cfg, &shards, event_type, Some(order[w].index), jobs[w])?);
            heap.push(Event {
                time: ev.time + timings[w].idle,
                fetch: true,
                worker: w,
            });
        }
    }
    Ok(SimOutcome {
        server,
        trace,
        metrics,
    })
}

/// Write metrics with header
/// `event_time,event_type,worker,round,error,nll,messages_up,messages_down,global_fe`.
pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| PviError::Data(e.to_string());
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    w.write_record([
        "event_time",
        "event_type",
        "worker",
        "round",
        "error",
        "nll",
        "messages_up",
        "messages_down",
        "global_fe",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.event_time.to_string(),
            r.event_type.to_string(),
            r.worker.map(|x| x.to_string()).unwrap_or_default(),
            r.round.to_string(),
            opt(r.error),
            opt(r.nll),
            r.messages_up.to_string(),
            r.messages_down.to_string(),
            opt(r.global_fe),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| PviError::Data(e.to_string()))
}
