use serde::{Deserialize, Serialize};

use super::{ratio, MetricsError, PredictionSet};
use crate::taxonomy::LabelId;

/// Column name for predictions that could not be mapped to a label.
pub const UNPARSED: &str = "UNPARSED";

/// Counts `c[j][k]`: documents with true label `j` predicted as `k`. Column
/// `M` holds documents whose prediction was empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<LabelId>,
    pub counts: Vec<Vec<u64>>,
}

/// One-vs-rest counts and rates for a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: LabelId,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassStats {
    pub fn from_counts(label: LabelId, tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let specificity = ratio(tn, tn + fp);
        let balanced_accuracy = match (recall, specificity) {
            (Some(r), Some(s)) => Some((r + s) / 2.0),
            _ => None,
        };
        // 2PR/(P+R) written over counts: zero when P+R is zero, undefined
        // only when the class appears in neither truth nor predictions.
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        ClassStats {
            label,
            support: tp + fn_,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            specificity,
            balanced_accuracy,
            f1,
        }
    }

    pub fn sensitivity(&self) -> Option<f64> {
        self.recall
    }
}

impl ConfusionMatrix {
    /// Requires exactly one true label per row and at most one predicted
    /// label (none means unparsed).
    pub fn from_predictions(set: &PredictionSet) -> Result<Self, MetricsError> {
        let m = set.m();
        let mut counts = vec![vec![0u64; m + 1]; m];
        for r in &set.rows {
            let j = r.truth.single().ok_or_else(|| MetricsError::WrongMode {
                doc: r.doc_id.clone(),
                message: format!("exclusive evaluation needs exactly one true label, found {}", r.truth.count()),
            })?;
            let k = match r.pred.count() {
                0 => m,
                1 => r.pred.single().expect("one bit"),
                c => {
                    return Err(MetricsError::WrongMode {
                        doc: r.doc_id.clone(),
                        message: format!("exclusive evaluation allows one predicted label, found {c}"),
                    })
                }
            };
            counts[j][k] += 1;
        }
        Ok(ConfusionMatrix { labels: set.labels.clone(), counts })
    }

    /// From a square matrix or one with a trailing unparsed column.
    pub fn from_counts(labels: Vec<LabelId>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let m = labels.len();
        if counts.len() != m {
            return Err(MetricsError::BadMatrix { expected: m });
        }
        let counts = counts
            .into_iter()
            .map(|mut row| match row.len() {
                l if l == m => {
                    row.push(0);
                    Ok(row)
                }
                l if l == m + 1 => Ok(row),
                _ => Err(MetricsError::BadMatrix { expected: m }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.m()).map(|j| self.counts[j][j]).sum()
    }

    pub fn unparsed(&self) -> u64 {
        let m = self.m();
        self.counts.iter().map(|r| r[m]).sum()
    }

    /// trace / n; unparsed rows count as wrong.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.n())
    }

    pub fn class(&self, j: usize) -> ClassStats {
        let n = self.n();
        let tp = self.counts[j][j];
        let fn_ = self.counts[j].iter().sum::<u64>() - tp;
        let fp = self.counts.iter().map(|r| r[j]).sum::<u64>() - tp;
        let tn = n - tp - fn_ - fp;
        ClassStats::from_counts(self.labels[j].clone(), tp, fp, fn_, tn)
    }

    pub fn per_class(&self) -> Vec<ClassStats> {
        (0..self.m()).map(|j| self.class(j)).collect()
    }

    pub fn precision(&self, j: usize) -> Option<f64> {
        self.class(j).precision
    }

    pub fn recall(&self, j: usize) -> Option<f64> {
        self.class(j).recall
    }

    pub fn specificity(&self, j: usize) -> Option<f64> {
        self.class(j).specificity
    }

    pub fn balanced_accuracy(&self, j: usize) -> Option<f64> {
        self.class(j).balanced_accuracy
    }

    pub fn f1(&self, j: usize) -> Option<f64> {
        self.class(j).f1
    }
}
