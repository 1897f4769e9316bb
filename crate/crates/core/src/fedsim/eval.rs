use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::GaussianDist;
use crate::models::{self, Dataset, Hyperparams, ModelKind, Prediction, DEFAULT_EVAL_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalCfg {
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            mc_samples: DEFAULT_EVAL_SAMPLES,
            seed: 0,
        }
    }
}

/// Test-set error and mean negative log predictive density.
///
/// For classifiers `error` is the misclassification rate at threshold 0.5;
/// for regression models it is the root-mean-square error of the
/// predictive mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub error: f64,
    pub nll: f64,
}

const MIN_PROB: f64 = 1e-12;

pub fn evaluate(
    q: &GaussianDist,
    model: &ModelKind,
    test: &Dataset,
    eps: &Hyperparams,
    cfg: &EvalCfg,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(PviError::InvalidArgument("test set is empty".into()));
    }
    let preds = models::predict_batch(model, q, test.rows(), eps, cfg.mc_samples, cfg.seed)?;
    let n = test.len() as f64;
    let mut err = 0.0;
    let mut nll = 0.0;
    for (p, r) in preds.iter().zip(test.rows()) {
        match p {
            Prediction::Class { probability } => {
                let label = if *probability >= 0.5 { 1.0 } else { 0.0 };
                if (label - r.target).abs() > 0.5 {
                    err += 1.0;
                }
                let py = if r.target > 0.5 {
                    *probability
                } else {
                    1.0 - probability
                };
                nll -= py.max(MIN_PROB).ln();
            }
            Prediction::Regression { mean, variance } => {
                for (m, v) in mean.iter().zip(variance) {
                    let d = r.target - m;
                    err += d * d / mean.len() as f64;
                    let v = v.max(MIN_PROB);
                    nll += 0.5 * ((2.0 * PI * v).ln() + d * d / v);
                }
            }
        }
    }
    let error = match preds.first() {
        Some(Prediction::Regression { .. }) => (err / n).sqrt(),
        _ => err / n,
    };
    Ok(Evaluation {
        error,
        nll: nll / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Row;

    #[test]
    fn coin_flip_predictor_has_log_two_loss() {
        // A point mass at zero predicts 0.5 everywhere.
        let q = GaussianDist::from_mean_var(&[0.0, 0.0], &[1e-12, 1e-12]).unwrap();
        let test = Dataset::new(vec![
            Row::new(vec![1.0, 1.0], 1.0),
            Row::new(vec![-2.0, 1.0], 0.0),
        ])
        .unwrap();
        let e = evaluate(
            &q,
            &ModelKind::logistic(64, 0),
            &test,
            &Hyperparams::new(),
            &EvalCfg::default(),
        )
        .unwrap();
        assert!((e.nll - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let q = GaussianDist::from_mean_var(&[0.0], &[1.0]).unwrap();
        assert!(evaluate(
            &q,
            &ModelKind::logistic(64, 0),
            &Dataset::empty(),
            &Hyperparams::new(),
            &EvalCfg::default()
        )
        .is_err());
    }
}
