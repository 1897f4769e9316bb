use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::models::Dataset;
use crate::pvi::Shards;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionMode {
    /// Shuffle, then deal rows round-robin.
    Iid,
    /// Every shard holds one class. `K` must be a multiple of the number of
    /// classes; each class is dealt across `K / C` shards.
    ByLabel,
    /// Per-class shard proportions drawn from a symmetric Dirichlet.
    DirichletSkew { concentration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

/// One worker's data and the indices of its rows in the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard {
    pub index: usize,
    pub data: Dataset,
    pub rows: Vec<usize>,
}

pub fn to_shards(shards: &[DataShard]) -> Shards {
    shards.iter().map(|s| (s.index, s.data.clone())).collect()
}

fn class_rows(data: &Dataset) -> Vec<Vec<usize>> {
    let classes = data.classes();
    let mut out = vec![Vec::new(); classes.len()];
    for (i, r) in data.rows().iter().enumerate() {
        let c = classes
            .iter()
            .position(|c| c.to_bits() == r.target.to_bits())
            .expect("class list covers every target");
        out[c].push(i);
    }
    out
}

pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<DataShard>> {
    let k = spec.k;
    if k == 0 {
        return Err(PviError::InvalidPartition("K must be >= 1".into()));
    }
    let mut assign: Vec<Vec<usize>> = vec![Vec::new(); k];
    match spec.mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut seed::rng(spec.seed, &[0]));
            for (j, i) in idx.into_iter().enumerate() {
                assign[j % k].push(i);
            }
        }
        PartitionMode::ByLabel => {
            let by_class = class_rows(data);
            let c = by_class.len();
            if c == 0 || !k.is_multiple_of(c) {
                return Err(PviError::InvalidPartition(format!(
                    "by-label partition needs K to be a multiple of the class count {c}, got K = {k}"
                )));
            }
            let per = k / c;
            for (ci, mut rows) in by_class.into_iter().enumerate() {
                rows.shuffle(&mut seed::rng(spec.seed, &[1, ci as u64]));
                for (j, i) in rows.into_iter().enumerate() {
                    assign[ci * per + j % per].push(i);
                }
            }
        }
        PartitionMode::DirichletSkew { concentration } => {
            if !(concentration > 0.0 && concentration.is_finite()) {
                return Err(PviError::InvalidPartition(format!(
                    "concentration must be positive, got {concentration}"
                )));
            }
            let gamma = Gamma::new(concentration, 1.0)
                .map_err(|e| PviError::InvalidPartition(e.to_string()))?;
            for (ci, mut rows) in class_rows(data).into_iter().enumerate() {
                let mut rng = seed::rng(spec.seed, &[2, ci as u64]);
                rows.shuffle(&mut rng);
                let g: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = g.iter().sum();
                let n = rows.len();
                // Cut points from the cumulative proportions.
                let mut start = 0;
                let mut acc = 0.0;
                for (s, gi) in g.iter().enumerate() {
                    acc += gi;
                    let end = if s + 1 == k {
                        n
                    } else {
                        ((acc / total) * n as f64).round() as usize
                    }
                    .clamp(start, n);
                    assign[s].extend_from_slice(&rows[start..end]);
                    start = end;
                }
            }
        }
    }
    Ok(assign
        .into_iter()
        .enumerate()
        .map(|(index, mut rows)| {
            rows.sort_unstable();
            DataShard {
                index,
                data: data.subset(&rows),
                rows,
            }
        })
        .collect())
}
