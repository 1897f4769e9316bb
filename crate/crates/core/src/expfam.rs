//! Diagonal-Gaussian exponential family over θ ∈ R^D.
//!
//! Sufficient statistics are `T(θ) = (θ, θ²)` per coordinate. Natural
//! parameters are `eta1 = m / v` and `eta2 = -1 / (2v)`; mean parameters are
//! `mu1 = E[θ] = m` and `mu2 = E[θ²] = v + m²`.
//!
//! [`NaturalParams`] doubles as the representation of (possibly improper)
//! site factors `exp(eta1·θ + eta2·θ²)`. A [`GaussianDist`] is a validated,
//! normalizable [`NaturalParams`] with its log-partition cached.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::seed;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural parameters `(eta1, eta2)` of a diagonal Gaussian or site factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NaturalParamsRepr", into = "NaturalParamsRepr")]
pub struct NaturalParams {
    eta1: Vec<f64>,
    eta2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NaturalParamsRepr {
    dim: usize,
    eta1: Vec<f64>,
    eta2: Vec<f64>,
}

impl TryFrom<NaturalParamsRepr> for NaturalParams {
    type Error = PviError;

    fn try_from(r: NaturalParamsRepr) -> Result<Self> {
        if r.eta1.len() != r.dim {
            return Err(PviError::DimensionMismatch {
                expected: r.dim,
                found: r.eta1.len(),
            });
        }
        NaturalParams::new(r.eta1, r.eta2)
    }
}

impl From<NaturalParams> for NaturalParamsRepr {
    fn from(n: NaturalParams) -> Self {
        NaturalParamsRepr {
            dim: n.dim(),
            eta1: n.eta1,
            eta2: n.eta2,
        }
    }
}

/// Mean parameters `(E[θ], E[θ²])` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanParams {
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
}

impl MeanParams {
    pub fn new(mu1: Vec<f64>, mu2: Vec<f64>) -> Result<Self> {
        if mu1.len() != mu2.len() {
            return Err(PviError::DimensionMismatch {
                expected: mu1.len(),
                found: mu2.len(),
            });
        }
        Ok(MeanParams { mu1, mu2 })
    }

    pub fn from_mean_var(mean: &[f64], var: &[f64]) -> Result<Self> {
        check_dims(mean.len(), var.len())?;
        Ok(MeanParams {
            mu1: mean.to_vec(),
            mu2: mean.iter().zip(var).map(|(m, v)| v + m * m).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu1.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.mu1
            .iter()
            .zip(&self.mu2)
            .map(|(m1, m2)| m2 - m1 * m1)
            .collect()
    }

    pub fn to_natural(&self) -> Result<NaturalParams> {
        to_natural(self)
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(PviError::DimensionMismatch {
            expected: a,
            found: b,
        })
    }
}

impl NaturalParams {
    /// Build from raw vectors; only requires equal lengths and finite entries.
    pub fn new(eta1: Vec<f64>, eta2: Vec<f64>) -> Result<Self> {
        check_dims(eta1.len(), eta2.len())?;
        if let Some(index) = eta1
            .iter()
            .zip(&eta2)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(PviError::NonFiniteParameter { index });
        }
        Ok(NaturalParams { eta1, eta2 })
    }

    /// The unit site factor `t(θ) = 1`.
    pub fn zeros(dim: usize) -> Self {
        NaturalParams {
            eta1: vec![0.0; dim],
            eta2: vec![0.0; dim],
        }
    }

    pub fn from_mean_var(mean: &[f64], var: &[f64]) -> Result<Self> {
        check_dims(mean.len(), var.len())?;
        if let Some(index) = var.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(PviError::NonPositiveVariance {
                index,
                variance: var[index],
            });
        }
        NaturalParams::new(
            mean.iter().zip(var).map(|(m, v)| m / v).collect(),
            var.iter().map(|v| -0.5 / v).collect(),
        )
    }

    /// Isotropic Gaussian `N(mean·1, var·I)` in `dim` coordinates.
    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Result<Self> {
        Self::from_mean_var(&vec![mean; dim], &vec![var; dim])
    }

    pub fn dim(&self) -> usize {
        self.eta1.len()
    }

    pub fn eta1(&self) -> &[f64] {
        &self.eta1
    }

    pub fn eta2(&self) -> &[f64] {
        &self.eta2
    }

    /// Iterate `(eta1, eta2)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.eta1.iter().copied().zip(self.eta2.iter().copied())
    }

    /// Concatenation `[eta1..., eta2...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.eta1.iter().chain(&self.eta2).copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(PviError::InvalidArgument(format!(
                "flat natural parameters need even length, got {}",
                flat.len()
            )));
        }
        let d = flat.len() / 2;
        NaturalParams::new(flat[..d].to_vec(), flat[d..].to_vec())
    }

    pub fn is_normalizable(&self) -> bool {
        self.eta2.iter().all(|&e| e < 0.0)
    }

    /// First coordinate with `eta2 >= 0`, if any.
    pub fn first_improper(&self) -> Option<(usize, f64)> {
        self.eta2
            .iter()
            .position(|&e| !(e < 0.0))
            .map(|i| (i, self.eta2[i]))
    }

    pub fn check_normalizable(&self) -> Result<()> {
        match self.first_improper() {
            None => Ok(()),
            Some((index, eta2)) => Err(PviError::NotNormalizable { index, eta2 }),
        }
    }

    pub fn multiply(&self, other: &NaturalParams) -> Result<NaturalParams> {
        multiply(self, other)
    }

    pub fn divide(&self, other: &NaturalParams) -> Result<NaturalParams> {
        divide(self, other)
    }

    /// Raise the factor to a real power: `t(θ)^s`.
    pub fn scale(&self, s: f64) -> NaturalParams {
        NaturalParams {
            eta1: self.eta1.iter().map(|x| s * x).collect(),
            eta2: self.eta2.iter().map(|x| s * x).collect(),
        }
    }

    /// `(1 - w)·self + w·other`, i.e. the geometric interpolation of factors.
    pub fn interpolate(&self, other: &NaturalParams, w: f64) -> Result<NaturalParams> {
        check_dims(self.dim(), other.dim())?;
        let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
        };
        NaturalParams::new(lerp(&self.eta1, &other.eta1), lerp(&self.eta2, &other.eta2))
    }

    /// Max-abs distance between two parameter vectors.
    pub fn linf_distance(&self, other: &NaturalParams) -> f64 {
        self.eta1
            .iter()
            .zip(&other.eta1)
            .chain(self.eta2.iter().zip(&other.eta2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn linf_norm(&self) -> f64 {
        self.eta1
            .iter()
            .chain(&self.eta2)
            .map(|x| x.abs())
            .fold(0.0, f64::max)
    }

    /// Log-partition `A(η)`; requires a normalizable input.
    pub fn log_partition(&self) -> Result<f64> {
        self.check_normalizable()?;
        Ok(log_partition_unchecked(self))
    }

    pub fn to_mean(&self) -> Result<MeanParams> {
        to_mean(self)
    }

    /// Per-coordinate `(mean, variance)`; requires normalizable input.
    pub fn mean_var(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_normalizable()?;
        let var: Vec<f64> = self.eta2.iter().map(|e| -0.5 / e).collect();
        let mean = self.eta1.iter().zip(&var).map(|(e, v)| e * v).collect();
        Ok((mean, var))
    }
}

fn log_partition_unchecked(n: &NaturalParams) -> f64 {
    n.iter()
        .map(|(e1, e2)| -e1 * e1 / (4.0 * e2) - 0.5 * (-2.0 * e2).ln() + HALF_LN_2PI)
        .sum()
}

/// Product of two factors: natural parameters add.
pub fn multiply(a: &NaturalParams, b: &NaturalParams) -> Result<NaturalParams> {
    check_dims(a.dim(), b.dim())?;
    Ok(NaturalParams {
        eta1: a.eta1.iter().zip(&b.eta1).map(|(x, y)| x + y).collect(),
        eta2: a.eta2.iter().zip(&b.eta2).map(|(x, y)| x + y).collect(),
    })
}

/// Ratio of two factors: natural parameters subtract.
pub fn divide(a: &NaturalParams, b: &NaturalParams) -> Result<NaturalParams> {
    check_dims(a.dim(), b.dim())?;
    Ok(NaturalParams {
        eta1: a.eta1.iter().zip(&b.eta1).map(|(x, y)| x - y).collect(),
        eta2: a.eta2.iter().zip(&b.eta2).map(|(x, y)| x - y).collect(),
    })
}

pub fn to_mean(n: &NaturalParams) -> Result<MeanParams> {
    let (mean, var) = n.mean_var()?;
    let mu2 = mean.iter().zip(&var).map(|(m, v)| v + m * m).collect();
    Ok(MeanParams { mu1: mean, mu2 })
}

pub fn to_natural(m: &MeanParams) -> Result<NaturalParams> {
    check_dims(m.mu1.len(), m.mu2.len())?;
    let var = m.variance();
    NaturalParams::from_mean_var(&m.mu1, &var)
}

/// Per-coordinate 2×2 block of the Fisher information `dμ/dη`, ordered
/// `[[dmu1/deta1, dmu1/deta2], [dmu2/deta1, dmu2/deta2]]`.
pub type FisherBlock = [[f64; 2]; 2];

/// A validated normalizable diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianDist {
    natural: NaturalParams,
    log_partition: f64,
}

impl TryFrom<NaturalParams> for GaussianDist {
    type Error = PviError;

    fn try_from(natural: NaturalParams) -> Result<Self> {
        GaussianDist::new(natural)
    }
}

impl GaussianDist {
    pub fn new(natural: NaturalParams) -> Result<Self> {
        natural.check_normalizable()?;
        let log_partition = log_partition_unchecked(&natural);
        Ok(GaussianDist {
            natural,
            log_partition,
        })
    }

    pub fn from_mean_var(mean: &[f64], var: &[f64]) -> Result<Self> {
        Self::new(NaturalParams::from_mean_var(mean, var)?)
    }

    pub fn natural(&self) -> &NaturalParams {
        &self.natural
    }

    pub fn into_natural(self) -> NaturalParams {
        self.natural
    }

    pub fn dim(&self) -> usize {
        self.natural.dim()
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn mean(&self) -> Vec<f64> {
        self.natural
            .iter()
            .map(|(e1, e2)| -e1 / (2.0 * e2))
            .collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.natural.eta2.iter().map(|e| -0.5 / e).collect()
    }

    pub fn mean_params(&self) -> MeanParams {
        to_mean(&self.natural).expect("GaussianDist is normalizable by construction")
    }

    /// Closed-form `dμ/dη` blocks, one per coordinate.
    pub fn fisher(&self) -> Vec<FisherBlock> {
        fisher_blocks(self)
    }

    pub fn kl(&self, other: &GaussianDist) -> Result<f64> {
        kl_divergence(self, other)
    }

    /// Log density at a point.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        check_dims(self.dim(), theta.len())?;
        let lin: f64 = self
            .natural
            .iter()
            .zip(theta)
            .map(|((e1, e2), t)| e1 * t + e2 * t * t)
            .sum();
        Ok(lin - self.log_partition)
    }

    pub fn entropy(&self) -> f64 {
        self.variance()
            .iter()
            .map(|v| 0.5 * (2.0 * PI * std::f64::consts::E * v).ln())
            .sum()
    }
}

/// `KL(q ‖ p)` summed over coordinates.
pub fn kl_divergence(q: &GaussianDist, p: &GaussianDist) -> Result<f64> {
    check_dims(q.dim(), p.dim())?;
    let (mq, vq) = (q.mean(), q.variance());
    let (mp, vp) = (p.mean(), p.variance());
    let kl = (0..q.dim())
        .map(|i| {
            let d = mp[i] - mq[i];
            0.5 * (vq[i] / vp[i] + d * d / vp[i] - 1.0 + (vp[i] / vq[i]).ln())
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `count × dim` draws `mean + sd ⊙ ε`, with `ε` from the stream `seed`.
pub fn sample(q: &GaussianDist, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(PviError::InvalidArgument("sample count must be >= 1".into()));
    }
    let mean = q.mean();
    let sd: Vec<f64> = q.variance().iter().map(|v| v.sqrt()).collect();
    let mut rng = seed::rng(seed, &[]);
    Ok((0..count)
        .map(|_| {
            mean.iter()
                .zip(&sd)
                .map(|(m, s)| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    m + s * eps
                })
                .collect()
        })
        .collect())
}

fn fisher_blocks(q: &GaussianDist) -> Vec<FisherBlock> {
    q.mean()
        .iter()
        .zip(q.variance())
        .map(|(&m, v)| {
            let cross = 2.0 * m * v;
            [[v, cross], [cross, 2.0 * v * v + 4.0 * m * m * v]]
        })
        .collect()
}

/// Diagonal of `dμ/dη` laid out as `[dmu1_i/deta1_i ..., dmu2_i/deta2_i ...]`.
pub fn fisher_diag(q: &GaussianDist) -> Vec<f64> {
    let blocks = fisher_blocks(q);
    blocks
        .iter()
        .map(|b| b[0][0])
        .chain(blocks.iter().map(|b| b[1][1]))
        .collect()
}
