use std::fs;
use std::path::Path;

use pvi_core::expfam::NaturalParams;
use pvi_core::fedsim::{
    evaluate, partition, run_asynchronous, run_bcm, run_sequential, run_synchronous, to_shards,
    write_metrics_csv, BcmMode, DataShard, MetricsRow, Problem, ServerState, SimCfg, WorkerCfg,
};
use pvi_core::models::Dataset;
use pvi_core::pep::{pep_step, spep_step, SharedSiteState};
use pvi_core::pvi::{
    global_free_energy, refine_fixed_point, stochastic_global_step, LocalOptimizerCfg, PosteriorState,
    RunCfg,
};
use pvi_core::seed;

use crate::config::{ExperimentConfig, StrategyName};
use crate::failure::Failure;

pub struct RunOutput {
    pub state: PosteriorState,
    pub metrics: Vec<MetricsRow>,
    /// Extra lines for standard output.
    pub notes: Vec<String>,
}

struct Setup {
    prior: NaturalParams,
    shards: Vec<DataShard>,
    test: Option<Dataset>,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, Failure> {
    let train = cfg.data.load()?;
    if train.is_empty() {
        return Err(Failure::Config("training data is empty".into()));
    }
    let test = cfg.test.as_ref().map(|t| t.load()).transpose()?;
    let dim = cfg.prior_dim(&train);
    let prior = NaturalParams::isotropic(dim, cfg.prior.mean, cfg.prior.variance)?;
    let shards = match &cfg.partition {
        Some(spec) => partition(&train, spec)?,
        None => vec![DataShard {
            index: 0,
            rows: (0..train.len()).collect(),
            data: train,
        }],
    };
    Ok(Setup { prior, shards, test })
}

fn sim_cfg(cfg: &ExperimentConfig, has_test: bool) -> SimCfg {
    SimCfg {
        worker: WorkerCfg {
            optimizer: cfg.optimizer,
            common_random_numbers: cfg.common_random_numbers,
            seed: cfg.seed,
        },
        record_global_fe: cfg.record_global_fe,
        eval: has_test.then_some(cfg.eval),
    }
}

fn run_cfg(cfg: &ExperimentConfig) -> RunCfg {
    RunCfg {
        optimizer: cfg.optimizer,
        tolerance: 0.0,
        common_random_numbers: cfg.common_random_numbers,
        seed: cfg.seed,
        ..RunCfg::default()
    }
}

fn scores(
    cfg: &ExperimentConfig,
    state: &PosteriorState,
    test: Option<&Dataset>,
) -> Result<(Option<f64>, Option<f64>), Failure> {
    match test {
        Some(t) => {
            let ev = evaluate(state.q(), &cfg.model, t, &cfg.hyper, &cfg.eval)?;
            Ok((Some(ev.error), Some(ev.nll)))
        }
        None => Ok((None, None)),
    }
}

pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput, Failure> {
    let Setup { prior, shards, test } = setup(cfg)?;
    let ids: Vec<usize> = shards.iter().map(|s| s.index).collect();
    let problem = Problem {
        shards: &shards,
        model: &cfg.model,
        eps: &cfg.hyper,
        test: test.as_ref(),
    };
    let sim = sim_cfg(cfg, test.is_some());
    let server = || -> Result<ServerState, Failure> {
        Ok(ServerState::new(PosteriorState::init(prior.clone(), &ids)?, cfg.damping)?)
    };
    let from_sim = |out: pvi_core::fedsim::SimOutcome| RunOutput {
        state: out.server.into_state(),
        metrics: out.metrics,
        notes: Vec::new(),
    };
    match cfg.strategy {
        StrategyName::GlobalVi => {
            let sweeps = cfg.sweeps.expect("validated");
            Ok(from_sim(run_synchronous(server()?, &problem, sweeps, &sim)?))
        }
        StrategyName::PviSequential => Ok(from_sim(run_sequential(server()?, &problem, &sim)?)),
        StrategyName::PviSync => {
            let rounds = cfg.sync.expect("validated").rounds;
            Ok(from_sim(run_synchronous(server()?, &problem, rounds, &sim)?))
        }
        StrategyName::PviAsync => {
            let acfg = cfg.asynchronous.as_ref().expect("validated");
            Ok(from_sim(run_asynchronous(server()?, &problem, acfg, &sim)?))
        }
        StrategyName::BcmSame | StrategyName::BcmSplit => {
            let mode = if cfg.strategy == StrategyName::BcmSame {
                BcmMode::Same
            } else {
                BcmMode::Split
            };
            bcm(cfg, &prior, &shards, test.as_ref(), mode)
        }
        StrategyName::PepCheck => pep(cfg, &prior, &shards, test.as_ref()),
        StrategyName::SpepCheck => spep(cfg, &prior, &shards, test.as_ref()),
    }
}

fn bcm(
    cfg: &ExperimentConfig,
    prior: &NaturalParams,
    shards: &[DataShard],
    test: Option<&Dataset>,
    mode: BcmMode,
) -> Result<RunOutput, Failure> {
    let sweeps = cfg.sweeps.expect("validated");
    let q = run_bcm(shards, prior, &cfg.model, &cfg.hyper, mode, sweeps, &run_cfg(cfg))?;
    let state = PosteriorState::init(prior.clone(), &[0])?.with_site(0, q.natural().divide(prior)?)?;
    let (error, nll) = scores(cfg, &state, test)?;
    let global_fe = if cfg.record_global_fe {
        let data = shards
            .iter()
            .try_fold(Dataset::empty(), |acc, s| acc.concat(&s.data))?;
        let all = [(0, data)].into_iter().collect();
        Some(global_free_energy(&state, &all, &cfg.model, &cfg.hyper, cfg.seed)?)
    } else {
        None
    };
    let k = shards.len() as u64;
    let metrics = vec![MetricsRow {
        event_time: 1.0,
        event_type: "combine",
        worker: None,
        round: 1,
        error,
        nll,
        messages_up: k,
        messages_down: 0,
        global_fe,
    }];
    Ok(RunOutput {
        state,
        metrics,
        notes: Vec::new(),
    })
}

fn pep(
    cfg: &ExperimentConfig,
    prior: &NaturalParams,
    shards: &[DataShard],
    test: Option<&Dataset>,
) -> Result<RunOutput, Failure> {
    let pcfg = cfg.pep.expect("validated");
    let sweeps = cfg.sweeps.expect("validated");
    let ids: Vec<usize> = shards.iter().map(|s| s.index).collect();
    let all = to_shards(shards);
    let fixed = LocalOptimizerCfg::fixed_point(pcfg.rho, 1);
    let mut state = PosteriorState::init(prior.clone(), &ids)?;
    let mut metrics = Vec::new();
    let mut worst: f64 = 0.0;
    let mut visit = 0usize;
    for sweep in 1..=sweeps {
        for s in shards {
            visit += 1;
            let vs = seed::derive(cfg.seed, &[visit as u64]);
            let (fp, _) = refine_fixed_point(&state, s.index, &s.data, &cfg.model, &cfg.hyper, &fixed, vs)?;
            let next = pep_step(&state, s.index, &s.data, &cfg.model, &cfg.hyper, &pcfg, vs)?;
            worst = worst.max(next.posterior().linf_distance(fp.posterior()));
            state = next;
            let (error, nll) = scores(cfg, &state, test)?;
            let global_fe = if cfg.record_global_fe {
                Some(global_free_energy(&state, &all, &cfg.model, &cfg.hyper, cfg.seed)?)
            } else {
                None
            };
            metrics.push(MetricsRow {
                event_time: visit as f64,
                event_type: "pep_step",
                worker: Some(s.index),
                round: sweep,
                error,
                nll,
                messages_up: visit as u64,
                messages_down: visit as u64,
                global_fe,
            });
        }
    }
    let notes = vec![format!(
        "alpha {} rho {}: max |pep step - pvi step| over {visit} steps = {worst:e}",
        pcfg.alpha, pcfg.rho
    )];
    Ok(RunOutput { state, metrics, notes })
}

fn spep(
    cfg: &ExperimentConfig,
    prior: &NaturalParams,
    shards: &[DataShard],
    test: Option<&Dataset>,
) -> Result<RunOutput, Failure> {
    let pcfg = cfg.pep.expect("validated");
    let sweeps = cfg.sweeps.expect("validated");
    let groups = shards.len();
    let mut shared = SharedSiteState::init(prior.clone(), groups)?;
    let mut metrics = Vec::new();
    let mut worst: f64 = 0.0;
    let mut visit = 0usize;
    let as_state = |s: &SharedSiteState| -> Result<PosteriorState, Failure> {
        Ok(PosteriorState::init(prior.clone(), &[0])?.with_site(0, s.site().scale(groups as f64))?)
    };
    for sweep in 1..=sweeps {
        for s in shards {
            visit += 1;
            let vs = seed::derive(cfg.seed, &[visit as u64]);
            let sg = stochastic_global_step(
                shared.q(),
                prior,
                &s.data,
                groups,
                pcfg.rho,
                &cfg.model,
                &cfg.hyper,
                vs,
            )?;
            let next = spep_step(&shared, &s.data, &cfg.model, &cfg.hyper, &pcfg, vs)?;
            worst = worst.max(next.posterior().linf_distance(&sg));
            shared = next;
            let (error, nll) = scores(cfg, &as_state(&shared)?, test)?;
            metrics.push(MetricsRow {
                event_time: visit as f64,
                event_type: "spep_step",
                worker: Some(s.index),
                round: sweep,
                error,
                nll,
                messages_up: visit as u64,
                messages_down: visit as u64,
                global_fe: None,
            });
        }
    }
    let notes = vec![format!(
        "alpha {} rho {}: max |spep step - stochastic VI step| over {visit} steps = {worst:e}",
        pcfg.alpha, pcfg.rho
    )];
    Ok(RunOutput {
        state: as_state(&shared)?,
        metrics,
        notes,
    })
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
        }
    }
    Ok(())
}

pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput) -> Result<(), Failure> {
    let metrics = &cfg.output.metrics;
    let checkpoint = &cfg.output.checkpoint;
    create_parent(metrics)?;
    create_parent(checkpoint)?;
    let file = fs::File::create(metrics)
        .map_err(|e| Failure::Config(format!("{}: {e}", metrics.display())))?;
    write_metrics_csv(&out.metrics, std::io::BufWriter::new(file))?;
    fs::write(checkpoint, out.state.to_checkpoint(&cfg.hyper).to_json())
        .map_err(|e| Failure::Config(format!("{}: {e}", checkpoint.display())))?;
    Ok(())
}
