use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    at_least_one_correct, exact_match_ratio, hamming_loss, jaccard, mean_defined, pct, per_label_stats, ClassStats,
    ConfusionMatrix, Crosstab, JaccardVariant, MetricsError, Mode, PredictionSet,
};
use crate::taxonomy::Taxonomy;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Class averages. Each `*_excluded` counts the classes whose value was
/// undefined and therefore left out of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub macro_precision: Option<f64>,
    pub macro_precision_excluded: usize,
    pub macro_recall: Option<f64>,
    pub macro_recall_excluded: usize,
    pub macro_specificity: Option<f64>,
    pub macro_specificity_excluded: usize,
    pub macro_balanced_accuracy: Option<f64>,
    pub macro_balanced_accuracy_excluded: usize,
    pub macro_f1: Option<f64>,
    pub macro_f1_excluded: usize,
    /// F1 weighted by true-class support.
    pub weighted_f1: Option<f64>,
}

impl Averages {
    pub fn from_classes(classes: &[ClassStats]) -> Self {
        let (macro_precision, macro_precision_excluded) = mean_defined(classes.iter().map(|c| c.precision));
        let (macro_recall, macro_recall_excluded) = mean_defined(classes.iter().map(|c| c.recall));
        let (macro_specificity, macro_specificity_excluded) = mean_defined(classes.iter().map(|c| c.specificity));
        let (macro_balanced_accuracy, macro_balanced_accuracy_excluded) =
            mean_defined(classes.iter().map(|c| c.balanced_accuracy));
        let (macro_f1, macro_f1_excluded) = mean_defined(classes.iter().map(|c| c.f1));
        let support: u64 = classes.iter().map(|c| c.support).sum();
        let weighted: f64 = classes.iter().filter_map(|c| c.f1.map(|f| f * c.support as f64)).sum();
        Averages {
            macro_precision,
            macro_precision_excluded,
            macro_recall,
            macro_recall_excluded,
            macro_specificity,
            macro_specificity_excluded,
            macro_balanced_accuracy,
            macro_balanced_accuracy_excluded,
            macro_f1,
            macro_f1_excluded,
            weighted_f1: (support > 0).then(|| weighted / support as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub n: usize,
    pub m: usize,
    /// Exclusive: trace / n. Multi-label: exact set match ratio.
    pub accuracy: Option<f64>,
    /// Documents without any predicted label.
    pub unparsed: u64,
    pub per_class: Vec<ClassStats>,
    pub averages: Averages,
    pub hamming_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard_standard: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard_label_count: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_least_one_correct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crosstab: Option<Crosstab>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

pub fn evaluate(set: &PredictionSet, mode: Mode) -> Result<MetricsReport, MetricsError> {
    if set.rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let unparsed = set.rows.iter().filter(|r| r.pred.count() == 0).count() as u64;
    let hamming = Some(hamming_loss(set)?);
    match mode {
        Mode::Exclusive => {
            let confusion = ConfusionMatrix::from_predictions(set)?;
            let per_class = confusion.per_class();
            Ok(MetricsReport {
                schema_version: REPORT_SCHEMA_VERSION,
                mode,
                n: set.n(),
                m: set.m(),
                accuracy: confusion.accuracy(),
                unparsed,
                averages: Averages::from_classes(&per_class),
                per_class,
                hamming_loss: hamming,
                jaccard_standard: None,
                jaccard_label_count: None,
                at_least_one_correct: None,
                crosstab: None,
                confusion: Some(confusion),
            })
        }
        Mode::Multilabel => {
            let per_class = per_label_stats(set);
            Ok(MetricsReport {
                schema_version: REPORT_SCHEMA_VERSION,
                mode,
                n: set.n(),
                m: set.m(),
                accuracy: Some(exact_match_ratio(set)?),
                unparsed,
                averages: Averages::from_classes(&per_class),
                per_class,
                hamming_loss: hamming,
                jaccard_standard: Some(jaccard(set, JaccardVariant::Standard)?),
                jaccard_label_count: Some(jaccard(set, JaccardVariant::LabelCount)?),
                at_least_one_correct: Some(at_least_one_correct(set)?),
                crosstab: Some(Crosstab::from_predictions(set)),
                confusion: None,
            })
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "n/a".into())
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Markdown tables with one-decimal percentages. `set_name` labels the
/// summary row (e.g. "test").
pub fn render_markdown(report: &MetricsReport, taxonomy: Option<&Taxonomy>, set_name: &str) -> String {
    let name = |c: &ClassStats| -> String {
        taxonomy.map(|t| t.display_name(&c.label).to_string()).unwrap_or_else(|| c.label.to_string())
    };
    let a = &report.averages;
    let mut s = String::new();
    match report.mode {
        Mode::Exclusive => {
            let _ = writeln!(s, "| Set | Size | Accuracy | F1 | Balanced Accuracy | Sensitivity | Specificity |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|");
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                set_name,
                thousands(report.n),
                cell(report.accuracy),
                cell(a.macro_f1),
                cell(a.macro_balanced_accuracy),
                cell(a.macro_recall),
                cell(a.macro_specificity)
            );
        }
        Mode::Multilabel => {
            let _ = writeln!(
                s,
                "| Set | Size | % at least one correct | Exact match | Hamming loss | Jaccard | Jaccard (/M) |"
            );
            let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|");
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                set_name,
                thousands(report.n),
                cell(report.at_least_one_correct),
                cell(report.accuracy),
                report.hamming_loss.map(|h| format!("{h:.4}")).unwrap_or_else(|| "n/a".into()),
                cell(report.jaccard_standard),
                cell(report.jaccard_label_count)
            );
        }
    }
    let _ = writeln!(s, "\nWeighted F1: {}", cell(a.weighted_f1));
    let excluded = [
        ("precision", a.macro_precision_excluded),
        ("recall", a.macro_recall_excluded),
        ("specificity", a.macro_specificity_excluded),
        ("balanced accuracy", a.macro_balanced_accuracy_excluded),
        ("F1", a.macro_f1_excluded),
    ];
    if excluded.iter().any(|(_, k)| *k > 0) {
        let parts: Vec<String> = excluded.iter().filter(|(_, k)| *k > 0).map(|(w, k)| format!("{w}: {k}")).collect();
        let _ = writeln!(s, "Classes left out of macro averages (undefined): {}", parts.join(", "));
    }
    if report.unparsed > 0 {
        let _ = writeln!(s, "Documents without a predicted label: {}", report.unparsed);
    }

    if let Some(ct) = &report.crosstab {
        let lo = if ct.size_pairs.first().map(|r| r.iter().sum::<u64>()).unwrap_or(0) > 0
            || ct.size_pairs.iter().any(|r| r[0] > 0)
        {
            0
        } else {
            1
        };
        let sizes: Vec<usize> = (lo..=ct.max_size()).collect();
        let _ = writeln!(s, "\n| True \\ Predicted | {} |", sizes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(s, "|---|{}", "---:|".repeat(sizes.len()));
        for r in &sizes {
            let cells: Vec<String> = sizes.iter().map(|c| cell(ct.cell(*r, *c))).collect();
            let _ = writeln!(s, "| {} | {} |", r, cells.join(" | "));
        }
        let _ = writeln!(s, "\nExact-match accuracy: {}", cell(ct.exact_match_accuracy()));
    }

    let _ = writeln!(s, "\n| Label | Support | Precision | Recall | Specificity | Balanced Accuracy | F1 |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|");
    for c in &report.per_class {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            name(c),
            c.support,
            cell(c.precision),
            cell(c.recall),
            cell(c.specificity),
            cell(c.balanced_accuracy),
            cell(c.f1)
        );
    }
    s
}
