//! Synthetic two-dimensional Gaussian-blob classification data.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::models::{Dataset, Row};
use crate::seed;

/// Class `c` of `C` is an isotropic Gaussian with standard deviation `sd`
/// centred at `offset + (separation / 2) · (cos 2πc/C, sin 2πc/C)`, so two
/// classes sit `separation` apart along the first axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub separation: f64,
    pub sd: f64,
    pub offset: [f64; 2],
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 2,
            per_class: 1000,
            separation: 3.0,
            sd: 1.0,
            offset: [0.0, 0.0],
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn centre(&self, c: usize) -> [f64; 2] {
        let a = 2.0 * std::f64::consts::PI * c as f64 / self.classes as f64;
        let r = 0.5 * self.separation;
        [self.offset[0] + r * a.cos(), self.offset[1] + r * a.sin()]
    }
}

/// Rows carry features `[x0, x1, 1.0]` (bias appended as by the CSV
/// loader) and target `c`. Rows are interleaved by class.
pub fn blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(PviError::InvalidArgument("blobs need at least 2 classes".into()));
    }
    if spec.per_class == 0 {
        return Err(PviError::InvalidArgument("per_class must be >= 1".into()));
    }
    if !(spec.sd > 0.0 && spec.sd.is_finite()) || !spec.separation.is_finite() {
        return Err(PviError::InvalidArgument(
            "sd must be positive and separation finite".into(),
        ));
    }
    let mut rng = seed::rng(spec.seed, &[]);
    let mut rows = Vec::with_capacity(spec.classes * spec.per_class);
    for _ in 0..spec.per_class {
        for c in 0..spec.classes {
            let m = spec.centre(c);
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            rows.push(Row::new(
                vec![m[0] + spec.sd * z0, m[1] + spec.sd * z1, 1.0],
                c as f64,
            ));
        }
    }
    Dataset::new(rows)
}
