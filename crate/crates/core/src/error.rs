use thiserror::Error;

/// Errors raised across the inference and simulation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PviError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("distribution is not normalizable: eta2[{index}] = {eta2} (must be < 0)")]
    NotNormalizable { index: usize, eta2: f64 },

    #[error("variance must be positive: coordinate {index} has variance {variance}")]
    NonPositiveVariance { index: usize, variance: f64 },

    #[error("non-finite parameter at coordinate {index}")]
    NonFiniteParameter { index: usize },

    #[error("cavity for shard {shard} is improper: eta2[{index}] = {eta2}")]
    ImproperCavity { shard: usize, index: usize, eta2: f64 },

    #[error("unknown shard {0}")]
    UnknownShard(usize),

    #[error("duplicate shard id {0}")]
    DuplicateShard(usize),

    #[error("refinement of shard {shard} diverged at iteration {iteration}: {reason}")]
    Divergence {
        shard: usize,
        iteration: usize,
        reason: String,
    },

    #[error("non-finite value in {context} (row {row:?})")]
    NonFinite {
        context: &'static str,
        row: Option<usize>,
    },

    #[error("unknown hyperparameter `{0}`")]
    UnknownHyper(String),

    #[error("missing hyperparameter `{0}`")]
    MissingHyper(String),

    #[error("tilted moments unreliable: effective sample size {ess:.2} < {min}")]
    UnreliableMoments { ess: f64, min: f64 },

    #[error("BCM-{mode} combination is not normalizable: eta2[{index}] = {eta2}")]
    ImproperCombination {
        mode: &'static str,
        index: usize,
        eta2: f64,
    },

    #[error("every delta in round {round} was rejected")]
    AllDeltasRejected { round: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),
}

impl PviError {
    /// True for the failures that the runner reports as a divergence
    /// (exit code 2) rather than as a configuration problem.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            PviError::Divergence { .. }
                | PviError::ImproperCavity { .. }
                | PviError::NotNormalizable { .. }
                | PviError::NonFinite { .. }
                | PviError::AllDeltasRejected { .. }
                | PviError::ImproperCombination { .. }
                | PviError::UnreliableMoments { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, PviError>;
