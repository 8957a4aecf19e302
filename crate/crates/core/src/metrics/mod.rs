//! Evaluation of predicted label sets against ground truth.
//!
//! Exclusive taxonomies are scored through an M x (M+1) confusion matrix
//! whose extra column collects unclassifiable predictions. Multi-label
//! taxonomies are scored per label (one-vs-rest counts) and with set
//! measures: Hamming loss, two Jaccard variants, at-least-one-correct and the
//! true-size by predicted-size cross-tabulation.
//!
//! Every ratio with a zero denominator is `None`. Macro averages skip those
//! classes and report how many were skipped. All accumulation is over
//! integer counts; division happens once at the end.

mod confusion;
mod multilabel;
mod report;

pub use confusion::{ClassStats, ConfusionMatrix, UNPARSED};
pub use multilabel::{
    at_least_one_correct, exact_match_ratio, hamming_loss, hamming_per_document, jaccard, per_label_stats,
    Crosstab, JaccardVariant,
};
pub use report::{evaluate, render_markdown, Averages, MetricsReport, REPORT_SCHEMA_VERSION};

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exclusive,
    Multilabel,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exclusive" => Ok(Mode::Exclusive),
            "multilabel" | "multi-label" | "multi_label" => Ok(Mode::Multilabel),
            other => Err(format!("unknown mode `{other}` (expected exclusive or multilabel)")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no rows to evaluate")]
    Empty,
    #[error("row `{doc}`: {message}")]
    WrongMode { doc: String, message: String },
    #[error("row `{doc}`: unknown label `{label}`")]
    UnknownLabel { doc: String, label: String },
    #[error("row `{doc}`: vector length {got}, expected {expected}")]
    Length { doc: String, got: usize, expected: usize },
    #[error("{0} documents have no ground-truth labels")]
    MissingTruth(usize),
    #[error("confusion matrix must be {expected} x {expected} (or {expected} x {} with an unparsed column)", expected + 1)]
    BadMatrix { expected: usize },
}

/// Presence bits over the M labels of a taxonomy, in taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(pub Vec<bool>);

impl LabelVector {
    pub fn empty(m: usize) -> Self {
        LabelVector(vec![false; m])
    }

    pub fn from_indices(m: usize, idx: impl IntoIterator<Item = usize>) -> Self {
        let mut v = vec![false; m];
        for i in idx {
            v[i] = true;
        }
        LabelVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// The set index when exactly one bit is set.
    pub fn single(&self) -> Option<usize> {
        let mut it = self.ones();
        match (it.next(), it.next()) {
            (Some(i), None) => Some(i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub doc_id: String,
    pub truth: LabelVector,
    pub pred: LabelVector,
}

/// Aligned truth and prediction vectors for n documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub labels: Vec<LabelId>,
    pub rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(labels: Vec<LabelId>, rows: Vec<PredictionRow>) -> Result<Self, MetricsError> {
        let m = labels.len();
        for r in &rows {
            for v in [&r.truth, &r.pred] {
                if v.len() != m {
                    return Err(MetricsError::Length { doc: r.doc_id.clone(), got: v.len(), expected: m });
                }
            }
        }
        Ok(PredictionSet { labels, rows })
    }

    /// Builds rows from label ids (or names) per document.
    pub fn from_label_sets(
        taxonomy: &Taxonomy,
        rows: impl IntoIterator<Item = (String, Vec<LabelId>, Vec<LabelId>)>,
    ) -> Result<Self, MetricsError> {
        let m = taxonomy.len();
        let to_vec = |doc: &str, ids: &[LabelId]| -> Result<LabelVector, MetricsError> {
            let mut idx = Vec::with_capacity(ids.len());
            for id in ids {
                let i = taxonomy
                    .index_of(id)
                    .or_else(|| taxonomy.resolve_token(id.as_str()).and_then(|r| taxonomy.index_of(&r)))
                    .ok_or_else(|| MetricsError::UnknownLabel { doc: doc.to_string(), label: id.to_string() })?;
                idx.push(i);
            }
            Ok(LabelVector::from_indices(m, idx))
        };
        let mut out = Vec::new();
        for (doc, truth, pred) in rows {
            out.push(PredictionRow { truth: to_vec(&doc, &truth)?, pred: to_vec(&doc, &pred)?, doc_id: doc });
        }
        PredictionSet::new(taxonomy.labels().iter().map(|l| l.id.clone()).collect(), out)
    }

    /// Pairs ground truth from `docs` with `preds` keyed by document id.
    /// Documents without a prediction get an empty (unclassified) vector;
    /// predictions for unknown documents are ignored.
    pub fn from_documents(
        taxonomy: &Taxonomy,
        docs: &[Document],
        preds: &HashMap<String, Vec<LabelId>>,
    ) -> Result<(Self, Alignment), MetricsError> {
        let missing_truth = docs.iter().filter(|d| d.true_labels.is_none()).count();
        if missing_truth > 0 {
            return Err(MetricsError::MissingTruth(missing_truth));
        }
        let ids: HashSet<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        let alignment = Alignment {
            missing_predictions: docs.iter().filter(|d| !preds.contains_key(&d.id)).count(),
            unmatched_predictions: preds.keys().filter(|k| !ids.contains(k.as_str())).count(),
        };
        let rows = docs.iter().map(|d| {
            (
                d.id.clone(),
                d.true_labels.clone().unwrap_or_default(),
                preds.get(&d.id).cloned().unwrap_or_default(),
            )
        });
        Ok((Self::from_label_sets(taxonomy, rows)?, alignment))
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub missing_predictions: usize,
    pub unmatched_predictions: usize,
}

/// `num / den`, or `None` when `den` is zero.
pub(crate) fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

/// Arithmetic mean of the defined values and the count of undefined ones.
pub(crate) fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut k = 0usize;
    let mut skipped = 0usize;
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                k += 1;
            }
            None => skipped += 1,
        }
    }
    ((k > 0).then(|| sum / k as f64), skipped)
}

/// One-decimal percentage, as the report tables print it.
pub fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}
