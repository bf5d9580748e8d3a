use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{class_indices, TaskKind, CCC_STABILIZER};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum MetricReport {
    Accuracy {
        accuracy: f64,
        correct: usize,
        total: usize,
    },
    Ccc {
        per_output: Vec<f64>,
        mean: f64,
    },
}

impl MetricReport {
    /// Accuracy, or mean CCC across outputs. Higher is better for both.
    pub fn value(&self) -> f64 {
        match self {
            MetricReport::Accuracy { accuracy, .. } => *accuracy,
            MetricReport::Ccc { mean, .. } => *mean,
        }
    }
}

/// Index of the largest logit in each row; ties go to the lower index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Concordance correlation of two equal-length series, with the same
/// denominator floor as the training loss.
pub fn ccc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    2.0 * cov / (vx + vy + (mx - my) * (mx - my)).max(CCC_STABILIZER)
}

pub fn compute_metrics(predictions: &Matrix, targets: &Matrix, kind: TaskKind) -> Result<MetricReport> {
    if predictions.rows() == 0 {
        return Err(Error::contract("metrics on an empty split"));
    }
    if predictions.rows() != targets.rows() {
        return Err(Error::Dimension {
            op: "compute_metrics",
            left: predictions.shape(),
            right: targets.shape(),
        });
    }
    match kind {
        TaskKind::Classification { num_classes } => {
            if predictions.cols() != num_classes {
                return Err(Error::Dimension {
                    op: "compute_metrics",
                    left: predictions.shape(),
                    right: (predictions.rows(), num_classes),
                });
            }
            let labels = class_indices(targets, num_classes)?;
            let correct = argmax_rows(predictions)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            Ok(MetricReport::Accuracy {
                accuracy: correct as f64 / labels.len() as f64,
                correct,
                total: labels.len(),
            })
        }
        TaskKind::Regression { .. } => {
            if predictions.shape() != targets.shape() {
                return Err(Error::Dimension {
                    op: "compute_metrics",
                    left: predictions.shape(),
                    right: targets.shape(),
                });
            }
            let (pt, tt) = (predictions.transpose(), targets.transpose());
            let per_output: Vec<f64> = (0..pt.rows()).map(|d| ccc(pt.row(d), tt.row(d))).collect();
            let mean = per_output.iter().sum::<f64>() / per_output.len() as f64;
            Ok(MetricReport::Ccc { per_output, mean })
        }
    }
}
