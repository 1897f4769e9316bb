//! Datasets of `(features, target)` rows and their CSV form.
//!
//! The CSV header is `f0,...,f{D-1},target`. The loader appends a constant
//! 1.0 bias feature to every row, so a file with `D` feature columns yields
//! rows of length `D + 1`; the writer drops it again.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub features: Vec<f64>,
    pub target: f64,
    /// Stable identity of the row within its source dataset. Monte-Carlo
    /// streams are keyed by it, so a row draws the same noise whichever
    /// shard it lands in.
    #[serde(default)]
    pub key: u64,
}

impl Row {
    pub fn new(features: Vec<f64>, target: f64) -> Self {
        Row {
            features,
            target,
            key: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<Row>,
}

impl Dataset {
    /// Build a dataset; row keys are reassigned to positions `0..n`.
    pub fn new(mut rows: Vec<Row>) -> Result<Self> {
        for (i, r) in rows.iter_mut().enumerate() {
            r.key = i as u64;
        }
        Self::with_keys(rows)
    }

    /// Build a dataset keeping the rows' existing keys.
    pub fn with_keys(rows: Vec<Row>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.features.len();
            if let Some(bad) = rows.iter().find(|r| r.features.len() != d) {
                return Err(PviError::DimensionMismatch {
                    expected: d,
                    found: bad.features.len(),
                });
            }
        }
        Ok(Dataset { rows })
    }

    pub fn empty() -> Self {
        Dataset { rows: Vec::new() }
    }

    /// Targets only, with empty feature vectors.
    pub fn from_targets(targets: &[f64]) -> Self {
        Dataset {
            rows: targets
                .iter()
                .enumerate()
                .map(|(i, &y)| Row {
                    features: Vec::new(),
                    target: y,
                    key: i as u64,
                })
                .collect(),
        }
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Feature dimension, or `None` for an empty dataset.
    pub fn feature_dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.features.len())
    }

    /// Rows at `indices`, keeping their keys.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Concatenation keeping keys.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        Dataset::with_keys(rows)
    }

    /// Distinct target values in ascending order (class labels for logistic data).
    pub fn classes(&self) -> Vec<f64> {
        let set: BTreeSet<u64> = self.rows.iter().map(|r| r.target.to_bits()).collect();
        let mut out: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| PviError::Data(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| PviError::Data(e.to_string()))?
            .clone();
        let ncol = headers.len();
        if ncol == 0 || &headers[ncol - 1] != "target" {
            return Err(PviError::Data(
                "last CSV column must be named `target`".into(),
            ));
        }
        for (i, h) in headers.iter().take(ncol - 1).enumerate() {
            if h != format!("f{i}") {
                return Err(PviError::Data(format!(
                    "feature column {i} must be named `f{i}`, found `{h}`"
                )));
            }
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| PviError::Data(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| PviError::Data(format!("row {line}: {e}")))?;
            let (feat, target) = vals.split_at(ncol - 1);
            let mut features = feat.to_vec();
            features.push(1.0);
            rows.push(Row::new(features, target[0]));
        }
        Dataset::new(rows)
    }

    /// Write rows in the CSV format, dropping the trailing bias feature.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.feature_dim().unwrap_or(1).saturating_sub(1);
        let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        header.push("target".into());
        w.write_record(&header)
            .map_err(|e| PviError::Data(e.to_string()))?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.features[..d].iter().map(|x| x.to_string()).collect();
            rec.push(r.target.to_string());
            w.write_record(&rec)
                .map_err(|e| PviError::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| PviError::Data(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path)
            .map_err(|e| PviError::Data(format!("{}: {e}", path.display())))?;
        self.write_csv(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_loader_appends_bias() {
        let text = "f0,f1,target\n0.5,-1.0,1\n2.0,3.0,0\n";
        let d = Dataset::read_csv(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.rows()[0].features, vec![0.5, -1.0, 1.0]);
        assert_eq!(d.rows()[1].target, 0.0);
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        assert_eq!(Dataset::read_csv(out.as_slice()).unwrap(), d);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(Dataset::read_csv("a,b,target\n1,2,3\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("f0,f1,y\n1,2,3\n".as_bytes()).is_err());
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let rows = vec![Row::new(vec![1.0], 0.0), Row::new(vec![1.0, 2.0], 1.0)];
        assert!(Dataset::new(rows).is_err());
    }

    #[test]
    fn classes_are_sorted_and_distinct() {
        let d = Dataset::from_targets(&[1.0, 0.0, 1.0, 2.0]);
        assert_eq!(d.classes(), vec![0.0, 1.0, 2.0]);
    }
}
