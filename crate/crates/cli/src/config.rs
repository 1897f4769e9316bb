use std::path::{Path, PathBuf};

use pvi_core::fedsim::{AsyncCfg, EvalCfg, PartitionSpec};
use pvi_core::models::{Dataset, Hyperparams, ModelKind};
use pvi_core::pep::PepCfg;
use pvi_core::pvi::LocalOptimizerCfg;
use pvi_core::synth::{blobs, BlobSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    GlobalVi,
    PviSequential,
    PviSync,
    PviAsync,
    BcmSame,
    BcmSplit,
    PepCheck,
    SpepCheck,
}

impl StrategyName {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::GlobalVi => "global_vi",
            StrategyName::PviSequential => "pvi_sequential",
            StrategyName::PviSync => "pvi_sync",
            StrategyName::PviAsync => "pvi_async",
            StrategyName::BcmSame => "bcm_same",
            StrategyName::BcmSplit => "bcm_split",
            StrategyName::PepCheck => "pep_check",
            StrategyName::SpepCheck => "spep_check",
        }
    }
}

/// Isotropic Gaussian prior. `dim` defaults to the feature dimension of the
/// training data (1 for the Gaussian-mean model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: f64,
    pub variance: f64,
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Blobs(BlobSpec),
    /// Columns `f0..f{d-1},target`; a bias feature is appended on load.
    Csv { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, Failure> {
        match self {
            DataSource::Blobs(spec) => blobs(spec).map_err(Failure::from),
            DataSource::Csv { path } => Dataset::load_csv(path).map_err(Failure::from),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncSection {
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub strategy: StrategyName,
    pub model: ModelKind,
    #[serde(default)]
    pub hyper: Hyperparams,
    pub prior: PriorSpec,
    pub data: DataSource,
    /// Held-out data for the error and nll columns.
    #[serde(default)]
    pub test: Option<DataSource>,
    #[serde(default)]
    pub partition: Option<PartitionSpec>,
    #[serde(default)]
    pub optimizer: LocalOptimizerCfg,
    /// Server damping applied to every incoming site delta.
    #[serde(default = "one")]
    pub damping: f64,
    #[serde(default)]
    pub common_random_numbers: bool,
    #[serde(default)]
    pub record_global_fe: bool,
    /// Full passes over the data (global VI, BCM workers, PEP checks).
    #[serde(default)]
    pub sweeps: Option<usize>,
    #[serde(default)]
    pub sync: Option<SyncSection>,
    #[serde(default, rename = "async")]
    pub asynchronous: Option<AsyncCfg>,
    #[serde(default)]
    pub pep: Option<PepCfg>,
    #[serde(default)]
    pub eval: EvalCfg,
    pub output: OutputPaths,
}

fn one() -> f64 {
    1.0
}

fn missing(field: &str, strategy: StrategyName) -> Failure {
    Failure::Config(format!(
        "missing required field `{field}` for strategy {}",
        strategy.as_str()
    ))
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self, Failure> {
        let cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| Failure::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    /// Checks that need no data: strategy-specific sections, hyperparameter
    /// names and the numeric ranges of the optimizer settings.
    pub fn validate(&self) -> Result<(), Failure> {
        use StrategyName::*;
        let s = self.strategy;
        let needs_partition = !matches!(s, GlobalVi);
        if needs_partition && self.partition.is_none() {
            return Err(missing("partition", s));
        }
        if matches!(s, GlobalVi | BcmSame | BcmSplit | PepCheck | SpepCheck) && self.sweeps.is_none() {
            return Err(missing("sweeps", s));
        }
        if s == PviSync && self.sync.is_none() {
            return Err(missing("sync", s));
        }
        if s == PviAsync && self.asynchronous.is_none() {
            return Err(missing("async", s));
        }
        if matches!(s, PepCheck | SpepCheck) && self.pep.is_none() {
            return Err(missing("pep", s));
        }
        for name in self.model.hyper_names() {
            if self.hyper.get(name).is_none() {
                return Err(Failure::Config(format!(
                    "missing required field `hyper.{name}` for this model"
                )));
            }
        }
        for name in self.hyper.names() {
            if !self.model.hyper_names().contains(&name) {
                return Err(Failure::Config(format!("unknown hyperparameter `{name}`")));
            }
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Failure::Config(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.prior.variance > 0.0 && self.prior.variance.is_finite()) || !self.prior.mean.is_finite() {
            return Err(Failure::Config("prior needs a finite mean and positive variance".into()));
        }
        if self.prior.dim == Some(0) {
            return Err(Failure::Config("prior.dim must be >= 1".into()));
        }
        if let Some(p) = &self.partition {
            if p.k == 0 {
                return Err(Failure::Config("partition.k must be >= 1".into()));
            }
        }
        if self.sweeps == Some(0) {
            return Err(Failure::Config("sweeps must be >= 1".into()));
        }
        if let Some(sync) = &self.sync {
            if sync.rounds == 0 {
                return Err(Failure::Config("sync.rounds must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn prior_dim(&self, train: &Dataset) -> usize {
        self.prior.dim.unwrap_or_else(|| match self.model {
            ModelKind::GaussianMean => 1,
            _ => train.feature_dim().unwrap_or(1),
        })
    }
}

/// Read a config file, apply `--set` overrides and `PVI_SEED`, and parse.
pub fn load(path: &Path, sets: &[String], env_seed: Option<String>) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut v: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    for s in sets {
        apply_override(&mut v, s)?;
    }
    if let Some(seed) = env_seed {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("PVI_SEED must be an unsigned integer, got `{seed}`")))?;
        set_path(&mut v, &["seed"], Value::from(seed))?;
    }
    ExperimentConfig::from_value(v)
}

/// Apply `a.b.c=value`. The value is read as JSON when it parses, otherwise
/// as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Failure::Config(format!("bad override path `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, &keys, value)
}

fn set_path(root: &mut Value, keys: &[&str], value: Value) -> Result<(), Failure> {
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just made an object")
            }
            _ => {
                return Err(Failure::Config(format!(
                    "cannot set `{}`: `{}` is not an object",
                    keys.join("."),
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Value {
        serde_json::from_str(include_str!("../configs/blobs_sync.json")).unwrap()
    }

    #[test]
    fn bundled_config_round_trips() {
        let a = ExperimentConfig::from_value(sample()).unwrap();
        let b: ExperimentConfig = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn overrides_reach_nested_leaves() {
        let mut v = sample();
        apply_override(&mut v, "optimizer.rho=0.5").unwrap();
        apply_override(&mut v, "output.metrics=elsewhere.csv").unwrap();
        apply_override(&mut v, "sync.rounds=3").unwrap();
        let cfg = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(cfg.optimizer.rho, 0.5);
        assert_eq!(cfg.output.metrics, PathBuf::from("elsewhere.csv"));
        assert_eq!(cfg.sync.unwrap().rounds, 3);
    }

    #[test]
    fn overrides_can_create_sections() {
        let mut v = sample();
        apply_override(&mut v, "pep={\"alpha\":0.5,\"rho\":0.5,\"method\":{\"kind\":\"monte_carlo\",\"samples\":100}}")
            .unwrap();
        let cfg = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(cfg.pep.unwrap().alpha, 0.5);
    }

    #[test]
    fn overriding_through_a_leaf_is_an_error() {
        let mut v = sample();
        assert!(apply_override(&mut v, "seed.x=1").is_err());
        assert!(apply_override(&mut v, "seed").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn strategy_sections_are_required() {
        let mut v = sample();
        v.as_object_mut().unwrap().remove("sync");
        match ExperimentConfig::from_value(v) {
            Err(Failure::Config(msg)) => assert!(msg.contains("`sync`"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut v = sample();
        apply_override(&mut v, "strategy=pep_check").unwrap();
        apply_override(&mut v, "sweeps=1").unwrap();
        match ExperimentConfig::from_value(v) {
            Err(Failure::Config(msg)) => assert!(msg.contains("`pep`"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn regression_models_need_a_noise_variance() {
        let mut v = sample();
        apply_override(&mut v, "model={\"kind\":\"linear_regression\"}").unwrap();
        match ExperimentConfig::from_value(v) {
            Err(Failure::Config(msg)) => assert!(msg.contains("hyper.obs_log_variance"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        let mut v = sample();
        apply_override(&mut v, "rounds=3").unwrap();
        assert!(ExperimentConfig::from_value(v).is_err());
    }
}
