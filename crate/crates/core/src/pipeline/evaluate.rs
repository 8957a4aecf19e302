use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scale::{PredictionRecord, PredictionStatus};
use crate::corpus::Corpus;
use crate::metrics::{evaluate, MetricsError, MetricsReport, Mode, PredictionSet};
use crate::taxonomy::LabelId;

/// Prediction-file line as read for evaluation; extra fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedLabels {
    pub id: String,
    pub labels: Vec<LabelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<PredictionStatus>,
}

impl From<PredictionRecord> for PredictedLabels {
    fn from(r: PredictionRecord) -> Self {
        PredictedLabels { id: r.id, labels: r.labels, status: Some(r.status) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub taxonomy: String,
    pub taxonomy_sha: String,
    pub predictions: usize,
    pub gold_documents: usize,
    /// Gold documents without a prediction; scored as unclassified.
    pub missing: usize,
    /// Predictions whose run recorded a failure.
    pub failed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metadata: RunMetadata,
    pub report: MetricsReport,
}

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("{} predicted ids are not in the gold corpus: {0:?}", .0.len())]
    IdMismatch(Vec<String>),
    #[error("document `{0}` is predicted more than once")]
    Duplicate(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Scores a run's predictions against the gold labels of `gold`.
pub fn evaluate_run(
    predictions: &[PredictedLabels],
    gold: &Corpus,
    mode: Mode,
    run: Option<String>,
) -> Result<RunReport, EvaluateError> {
    let mut unknown: Vec<String> = predictions.iter().filter(|p| gold.get(&p.id).is_none()).map(|p| p.id.clone()).collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(EvaluateError::IdMismatch(unknown));
    }
    let mut seen = HashSet::new();
    let mut map: HashMap<String, Vec<LabelId>> = HashMap::new();
    for p in predictions {
        if !seen.insert(p.id.as_str()) {
            return Err(EvaluateError::Duplicate(p.id.clone()));
        }
        map.insert(p.id.clone(), p.labels.clone());
    }
    let taxonomy = gold.taxonomy();
    let (set, alignment) = PredictionSet::from_documents(taxonomy, gold.documents(), &map)?;
    let report = evaluate(&set, mode)?;
    Ok(RunReport {
        metadata: RunMetadata {
            taxonomy: taxonomy.name().to_string(),
            taxonomy_sha: taxonomy.sha(),
            predictions: predictions.len(),
            gold_documents: gold.len(),
            missing: alignment.missing_predictions,
            failed: predictions.iter().filter(|p| p.status == Some(PredictionStatus::Failed)).count(),
            run,
        },
        report,
    })
}
