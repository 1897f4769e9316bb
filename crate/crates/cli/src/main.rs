mod check;
mod config;
mod failure;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pvi_core::fedsim::evaluate;
use pvi_core::pvi::Checkpoint;
use pvi_core::synth::{blobs, BlobSpec};

use crate::check::Suite;
use crate::failure::Failure;

/// Partitioned variational inference experiments.
#[derive(Debug, Parser)]
#[command(name = "pvi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override a config leaf, e.g. `--set optimizer.rho=0.5`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
        /// Print the resolved config and exit without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a Gaussian-blob classification dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 1000)]
        per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        sd: f64,
        /// Centre offset as `x,y`.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0], allow_hyphen_values = true)]
        offset: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an invariant suite and print a pass/fail table.
    Check {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on the config's test data (training data if none).
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
}

fn env_seed() -> Option<String> {
    std::env::var("PVI_SEED").ok()
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, sets, dry_run } => {
            let cfg = config::load(&config, &sets, env_seed())?;
            if dry_run {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let out = run::execute(&cfg)?;
            run::write_outputs(&cfg, &out)?;
            for note in &out.notes {
                println!("{note}");
            }
            if let Some(last) = out.metrics.last() {
                if let (Some(e), Some(n)) = (last.error, last.nll) {
                    println!("error {e}");
                    println!("nll {n}");
                }
            }
            Ok(())
        }
        Command::Synth {
            classes,
            per_class,
            separation,
            sd,
            offset,
            seed,
            out,
        } => {
            let [x, y] = offset[..] else {
                return Err(Failure::Config(format!("--offset takes two values, got {}", offset.len())));
            };
            let spec = BlobSpec {
                classes,
                per_class,
                separation,
                sd,
                offset: [x, y],
                seed,
            };
            let data = blobs(&spec)?;
            match out {
                Some(path) => data.save_csv(path)?,
                None => data.write_csv(std::io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Check { suite, seed } => check::check(suite, seed),
        Command::Eval {
            config,
            checkpoint,
            sets,
        } => {
            let cfg = config::load(&config, &sets, env_seed())?;
            let text = std::fs::read_to_string(&checkpoint)
                .map_err(|e| Failure::Config(format!("{}: {e}", checkpoint.display())))?;
            let (state, hyper) = Checkpoint::from_json(&text)?.into_state()?;
            let data = cfg.test.as_ref().unwrap_or(&cfg.data).load()?;
            let ev = evaluate(state.q(), &cfg.model, &data, &hyper, &cfg.eval)?;
            println!("error {}", ev.error);
            println!("nll {}", ev.nll);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
