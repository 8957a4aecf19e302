use serde::{Deserialize, Serialize};

use super::{ratio, ClassStats, MetricsError, PredictionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JaccardVariant {
    /// Mean over documents of |truth ∩ pred| / |truth ∪ pred|; two empty
    /// sets score 1.
    Standard,
    /// Sum of |truth ∩ pred| over documents divided by n·M.
    LabelCount,
}

fn non_empty(set: &PredictionSet) -> Result<(), MetricsError> {
    if set.rows.is_empty() {
        Err(MetricsError::Empty)
    } else {
        Ok(())
    }
}

fn intersection(a: &[bool], b: &[bool]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| **x && **y).count() as u64
}

fn union(a: &[bool], b: &[bool]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| **x || **y).count() as u64
}

fn mismatches(a: &[bool], b: &[bool]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u64
}

/// Share of label bits that differ, over all n·M bits.
pub fn hamming_loss(set: &PredictionSet) -> Result<f64, MetricsError> {
    non_empty(set)?;
    let wrong: u64 = set.rows.iter().map(|r| mismatches(&r.truth.0, &r.pred.0)).sum();
    Ok(wrong as f64 / (set.n() as u64 * set.m() as u64) as f64)
}

pub fn hamming_per_document(set: &PredictionSet) -> Vec<f64> {
    let m = set.m() as f64;
    set.rows.iter().map(|r| mismatches(&r.truth.0, &r.pred.0) as f64 / m).collect()
}

pub fn jaccard(set: &PredictionSet, variant: JaccardVariant) -> Result<f64, MetricsError> {
    non_empty(set)?;
    let n = set.n();
    Ok(match variant {
        JaccardVariant::Standard => {
            let total: f64 = set
                .rows
                .iter()
                .map(|r| {
                    let u = union(&r.truth.0, &r.pred.0);
                    if u == 0 {
                        1.0
                    } else {
                        intersection(&r.truth.0, &r.pred.0) as f64 / u as f64
                    }
                })
                .sum();
            total / n as f64
        }
        JaccardVariant::LabelCount => {
            let inter: u64 = set.rows.iter().map(|r| intersection(&r.truth.0, &r.pred.0)).sum();
            inter as f64 / (n as u64 * set.m() as u64) as f64
        }
    })
}

/// Share of documents where prediction and truth share a label. A document
/// with empty truth is a hit only when the prediction is empty too.
pub fn at_least_one_correct(set: &PredictionSet) -> Result<f64, MetricsError> {
    non_empty(set)?;
    let hits = set
        .rows
        .iter()
        .filter(|r| {
            if r.truth.count() == 0 {
                r.pred.count() == 0
            } else {
                intersection(&r.truth.0, &r.pred.0) > 0
            }
        })
        .count();
    Ok(hits as f64 / set.n() as f64)
}

/// Share of documents whose predicted set equals the true set.
pub fn exact_match_ratio(set: &PredictionSet) -> Result<f64, MetricsError> {
    non_empty(set)?;
    let hits = set.rows.iter().filter(|r| r.truth == r.pred).count();
    Ok(hits as f64 / set.n() as f64)
}

/// One-vs-rest counts for each label.
pub fn per_label_stats(set: &PredictionSet) -> Vec<ClassStats> {
    (0..set.m())
        .map(|j| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for r in &set.rows {
                match (r.truth.0[j], r.pred.0[j]) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            ClassStats::from_counts(set.labels[j].clone(), tp, fp, fn_, tn)
        })
        .collect()
}

/// Documents by (true set size, predicted set size).
///
/// `size_pairs[r][c]` counts every document with r true and c predicted
/// labels; its row and column sums are the two size distributions.
/// `exact_match[s]` counts documents whose predicted set equals the true
/// set of size s; these fill the diagonal of the rendered table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crosstab {
    pub n: u64,
    pub size_pairs: Vec<Vec<u64>>,
    pub exact_match: Vec<u64>,
}

impl Crosstab {
    pub fn from_predictions(set: &PredictionSet) -> Self {
        let max = set
            .rows
            .iter()
            .map(|r| r.truth.count().max(r.pred.count()))
            .max()
            .unwrap_or(0);
        let mut size_pairs = vec![vec![0u64; max + 1]; max + 1];
        let mut exact_match = vec![0u64; max + 1];
        for r in &set.rows {
            let (t, p) = (r.truth.count(), r.pred.count());
            size_pairs[t][p] += 1;
            if r.truth == r.pred {
                exact_match[t] += 1;
            }
        }
        Crosstab { n: set.n() as u64, size_pairs, exact_match }
    }

    pub fn max_size(&self) -> usize {
        self.exact_match.len().saturating_sub(1)
    }

    /// Rendered cell as a fraction: exact matches on the diagonal, size-pair
    /// counts elsewhere.
    pub fn cell(&self, true_size: usize, pred_size: usize) -> Option<f64> {
        let count = if true_size == pred_size {
            *self.exact_match.get(true_size)?
        } else {
            *self.size_pairs.get(true_size)?.get(pred_size)?
        };
        ratio(count, self.n)
    }

    pub fn exact_match_accuracy(&self) -> Option<f64> {
        ratio(self.exact_match.iter().sum(), self.n)
    }

    pub fn true_size_distribution(&self) -> Vec<u64> {
        self.size_pairs.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn pred_size_distribution(&self) -> Vec<u64> {
        (0..self.size_pairs.len()).map(|c| self.size_pairs.iter().map(|r| r[c]).sum()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{LabelVector, PredictionRow};
    use crate::taxonomy::LabelId;

    fn set(m: usize, rows: &[(&[usize], &[usize])]) -> PredictionSet {
        PredictionSet::new(
            (0..m).map(|i| LabelId::new(format!("l{i}"))).collect(),
            rows.iter()
                .enumerate()
                .map(|(i, (t, p))| PredictionRow {
                    doc_id: format!("d{i}"),
                    truth: LabelVector::from_indices(m, t.iter().copied()),
                    pred: LabelVector::from_indices(m, p.iter().copied()),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hamming_examples() {
        let s = set(4, &[(&[0, 2], &[0, 1])]);
        assert_eq!(hamming_per_document(&s), vec![0.5]);
        assert_eq!(hamming_loss(&s).unwrap(), 0.5);
        assert_eq!(hamming_loss(&set(4, &[(&[1], &[1])])).unwrap(), 0.0);
        assert_eq!(hamming_loss(&set(2, &[(&[0], &[1]), (&[1], &[0])])).unwrap(), 1.0);
    }

    #[test]
    fn jaccard_variants() {
        let s = set(5, &[(&[0, 1], &[1, 2])]);
        assert!((jaccard(&s, JaccardVariant::Standard).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&s, JaccardVariant::LabelCount).unwrap(), 0.2);
        let same = set(5, &[(&[0], &[0])]);
        assert_eq!(jaccard(&same, JaccardVariant::Standard).unwrap(), 1.0);
        assert_eq!(jaccard(&same, JaccardVariant::LabelCount).unwrap(), 0.2);
        let empty = set(5, &[(&[], &[])]);
        assert_eq!(jaccard(&empty, JaccardVariant::Standard).unwrap(), 1.0);
    }

    #[test]
    fn at_least_one() {
        assert_eq!(at_least_one_correct(&set(3, &[(&[0], &[0, 2])])).unwrap(), 1.0);
        assert_eq!(at_least_one_correct(&set(3, &[(&[0], &[2])])).unwrap(), 0.0);
        assert_eq!(at_least_one_correct(&set(3, &[(&[], &[])])).unwrap(), 1.0);
        assert_eq!(at_least_one_correct(&set(3, &[(&[], &[1])])).unwrap(), 0.0);
    }

    #[test]
    fn crosstab_cells() {
        let s = set(4, &[(&[0], &[0]), (&[0], &[1]), (&[0, 1], &[0, 1]), (&[0, 1], &[0, 2]), (&[2], &[0, 2])]);
        let c = Crosstab::from_predictions(&s);
        assert_eq!(c.exact_match, vec![0, 1, 1]);
        assert_eq!(c.size_pairs[1][1], 2);
        assert_eq!(c.size_pairs[2][2], 2);
        assert_eq!(c.size_pairs[1][2], 1);
        assert_eq!(c.cell(1, 1), Some(0.2));
        assert_eq!(c.cell(1, 2), Some(0.2));
        assert_eq!(c.exact_match_accuracy(), Some(0.4));
        assert_eq!(c.true_size_distribution(), vec![0, 3, 2]);
        assert_eq!(c.pred_size_distribution(), vec![0, 2, 3]);
    }

    #[test]
    fn empty_set_is_an_error() {
        let s = set(3, &[]);
        assert_eq!(hamming_loss(&s), Err(MetricsError::Empty));
        assert_eq!(jaccard(&s, JaccardVariant::LabelCount), Err(MetricsError::Empty));
    }
}
