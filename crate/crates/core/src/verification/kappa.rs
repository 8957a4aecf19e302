//! Chance-corrected agreement between coders.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Decision, VerificationRecord};
use crate::taxonomy::LabelId;

/// A kappa estimate. `value` is `None` when chance agreement is 1 and the
/// statistic is not defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: Option<f64>,
    pub percent: Option<f64>,
    pub observed: f64,
    pub expected: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undefined_reason: Option<String>,
}

impl Kappa {
    fn from_parts(observed: f64, expected: f64, n: usize) -> Self {
        if (1.0 - expected).abs() < 1e-12 {
            return Kappa {
                value: None,
                percent: None,
                observed,
                expected,
                n,
                undefined_reason: Some("chance agreement is 1 (every rating falls in one category)".into()),
            };
        }
        let k = (observed - expected) / (1.0 - expected);
        Kappa { value: Some(k), percent: Some(k * 100.0), observed, expected, n, undefined_reason: None }
    }

    pub fn is_defined(&self) -> bool {
        self.value.is_some()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KappaError {
    #[error("no items to compare")]
    Empty,
    #[error("rating lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("agreement table must be square and non-empty")]
    BadTable,
    #[error("Fleiss kappa needs at least two ratings per item; item {item} has {count}")]
    TooFewRaters { item: usize, count: usize },
    #[error("Fleiss kappa needs the same number of ratings per item (expected {expected}); offenders (item, count): {offenders:?}")]
    UnequalRaters { expected: usize, offenders: Vec<(usize, usize)> },
}

/// Unweighted Cohen kappa between two aligned rating lists.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<Kappa, KappaError> {
    if a.len() != b.len() {
        return Err(KappaError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(KappaError::Empty);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut ma: HashMap<&T, f64> = HashMap::new();
    let mut mb: HashMap<&T, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
    }
    let expected: f64 = ma.iter().map(|(k, ca)| (ca / n) * (mb.get(k).copied().unwrap_or(0.0) / n)).sum();
    Ok(Kappa::from_parts(agree / n, expected, a.len()))
}

/// Cohen kappa from a square agreement table (rows: coder A, columns: B).
pub fn cohen_from_table(table: &[Vec<u64>]) -> Result<Kappa, KappaError> {
    let k = table.len();
    if k == 0 || table.iter().any(|r| r.len() != k) {
        return Err(KappaError::BadTable);
    }
    let n: u64 = table.iter().flatten().sum();
    if n == 0 {
        return Err(KappaError::Empty);
    }
    let nf = n as f64;
    let diag: u64 = (0..k).map(|i| table[i][i]).sum();
    let expected: f64 = (0..k)
        .map(|i| {
            let row: u64 = table[i].iter().sum();
            let col: u64 = table.iter().map(|r| r[i]).sum();
            (row as f64 / nf) * (col as f64 / nf)
        })
        .sum();
    Ok(Kappa::from_parts(diag as f64 / nf, expected, n as usize))
}

/// Fleiss kappa over items each rated by the same number of raters.
pub fn fleiss_kappa<T: Eq + Hash + Ord>(items: &[Vec<T>]) -> Result<Kappa, KappaError> {
    if items.is_empty() {
        return Err(KappaError::Empty);
    }
    let r = items[0].len();
    let offenders: Vec<(usize, usize)> =
        items.iter().enumerate().filter(|(_, v)| v.len() != r).map(|(i, v)| (i, v.len())).collect();
    if !offenders.is_empty() {
        return Err(KappaError::UnequalRaters { expected: r, offenders });
    }
    if r < 2 {
        return Err(KappaError::TooFewRaters { item: 0, count: r });
    }
    let rf = r as f64;
    let mut totals: BTreeMap<&T, f64> = BTreeMap::new();
    let mut p_bar = 0.0;
    for item in items {
        let mut counts: BTreeMap<&T, f64> = BTreeMap::new();
        for c in item {
            *counts.entry(c).or_default() += 1.0;
        }
        let sq: f64 = counts.values().map(|c| c * c).sum();
        p_bar += (sq - rf) / (rf * (rf - 1.0));
        for (c, v) in counts {
            *totals.entry(c).or_default() += v;
        }
    }
    let n = items.len() as f64;
    p_bar /= n;
    let expected: f64 = totals.values().map(|t| (t / (n * rf)).powi(2)).sum();
    Ok(Kappa::from_parts(p_bar, expected, items.len()))
}

/// What an exclusive-taxonomy record amounts to for agreement purposes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum Category {
    Label(LabelId),
    NoneApply,
    Conflict,
}

pub fn exclusive_category(record: &VerificationRecord) -> Category {
    let kept = record.kept();
    match kept.len() {
        0 => Category::NoneApply,
        1 => Category::Label(kept[0].clone()),
        _ => Category::Conflict,
    }
}

/// Binary keep/reject agreement on one label, pooled over coder pairs.
pub fn per_label_kappa(pairs: &[(Decision, Decision)]) -> Result<Kappa, KappaError> {
    let (a, b): (Vec<Decision>, Vec<Decision>) = pairs.iter().copied().unzip();
    cohen_kappa(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub coder_a: String,
    pub coder_b: String,
    pub kappa: Kappa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelKappa {
    pub label: LabelId,
    pub kappa: Kappa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    /// Documents reviewed by two or more coders.
    pub overlap_documents: usize,
    /// Cohen kappa per coder pair on the reduced exclusive categories.
    /// Empty for multi-label taxonomies.
    pub pairwise: Vec<PairKappa>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleiss: Option<Kappa>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleiss_error: Option<String>,
    pub per_label: Vec<LabelKappa>,
    /// Mean of the defined per-label values.
    pub per_label_macro: Option<f64>,
    pub per_label_undefined: usize,
}

/// Agreement statistics over the current records (one per coder and
/// document). Only documents with at least two records contribute.
pub fn reliability(records: &[&VerificationRecord], exclusive: bool) -> ReliabilityReport {
    let mut by_doc: BTreeMap<&str, Vec<&VerificationRecord>> = BTreeMap::new();
    for r in records {
        by_doc.entry(r.doc_id.as_str()).or_default().push(r);
    }
    by_doc.retain(|_, v| v.len() >= 2);
    for v in by_doc.values_mut() {
        v.sort_by(|a, b| a.coder_id.cmp(&b.coder_id));
    }

    let mut pairwise = Vec::new();
    let mut fleiss = None;
    let mut fleiss_error = None;
    if exclusive {
        let coders: BTreeSet<&str> = by_doc.values().flatten().map(|r| r.coder_id.as_str()).collect();
        let coders: Vec<&str> = coders.into_iter().collect();
        for (i, a) in coders.iter().enumerate() {
            for b in &coders[i + 1..] {
                let (mut xa, mut xb) = (Vec::new(), Vec::new());
                for recs in by_doc.values() {
                    let ra = recs.iter().find(|r| r.coder_id == *a);
                    let rb = recs.iter().find(|r| r.coder_id == *b);
                    if let (Some(ra), Some(rb)) = (ra, rb) {
                        xa.push(exclusive_category(ra));
                        xb.push(exclusive_category(rb));
                    }
                }
                if let Ok(kappa) = cohen_kappa(&xa, &xb) {
                    pairwise.push(PairKappa { coder_a: a.to_string(), coder_b: b.to_string(), kappa });
                }
            }
        }
        let items: Vec<Vec<Category>> =
            by_doc.values().map(|recs| recs.iter().map(|r| exclusive_category(r)).collect()).collect();
        if !items.is_empty() {
            match fleiss_kappa(&items) {
                Ok(k) => fleiss = Some(k),
                Err(e) => fleiss_error = Some(e.to_string()),
            }
        }
    }

    let mut pooled: BTreeMap<LabelId, Vec<(Decision, Decision)>> = BTreeMap::new();
    for recs in by_doc.values() {
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                for (label, da) in &a.decisions {
                    if let Some(db) = b.decisions.get(label) {
                        pooled.entry(label.clone()).or_default().push((*da, *db));
                    }
                }
            }
        }
    }
    let per_label: Vec<LabelKappa> = pooled
        .into_iter()
        .filter_map(|(label, pairs)| per_label_kappa(&pairs).ok().map(|kappa| LabelKappa { label, kappa }))
        .collect();
    let defined: Vec<f64> = per_label.iter().filter_map(|k| k.kappa.value).collect();
    let per_label_undefined = per_label.len() - defined.len();
    let per_label_macro = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);

    ReliabilityReport {
        overlap_documents: by_doc.len(),
        pairwise,
        fleiss,
        fleiss_error,
        per_label,
        per_label_macro,
        per_label_undefined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Expands a 2x2 agreement table into rating lists.
    fn expand(table: [[usize; 2]; 2]) -> (Vec<u8>, Vec<u8>) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, row) in table.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    a.push(i as u8);
                    b.push(j as u8);
                }
            }
        }
        (a, b)
    }

    /// Direct enumeration of observed and chance agreement.
    fn oracle(a: &[u8], b: &[u8]) -> f64 {
        let n = a.len() as f64;
        let mut po = 0.0;
        for i in 0..a.len() {
            if a[i] == b[i] {
                po += 1.0;
            }
        }
        po /= n;
        let mut pe = 0.0;
        for c in 0u8..=255 {
            let fa = a.iter().filter(|&&x| x == c).count() as f64 / n;
            let fb = b.iter().filter(|&&x| x == c).count() as f64 / n;
            pe += fa * fb;
        }
        (po - pe) / (1.0 - pe)
    }

    #[test]
    fn table_fixture() {
        let (a, b) = expand([[20, 5], [10, 15]]);
        let k = cohen_kappa(&a, &b).unwrap();
        assert!((k.observed - 0.7).abs() < 1e-12);
        assert!((k.expected - 0.5).abs() < 1e-12);
        assert!((k.value.unwrap() - 0.4).abs() < 1e-12);
        assert!((k.value.unwrap() - oracle(&a, &b)).abs() < 1e-12);
        let t = cohen_from_table(&[vec![20, 5], vec![10, 15]]).unwrap();
        assert!((t.value.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement() {
        let a = vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1];
        assert_eq!(cohen_kappa(&a, &a).unwrap().value, Some(1.0));
    }

    #[test]
    fn degenerate_marginals_are_undefined() {
        let a = vec!["A"; 8];
        let k = cohen_kappa(&a, &a).unwrap();
        assert_eq!(k.value, None);
        assert_eq!(k.percent, None);
        assert!(k.undefined_reason.is_some());
        let f = fleiss_kappa(&vec![vec!["A", "A", "A"]; 5]).unwrap();
        assert!(!f.is_defined());
    }

    #[test]
    fn errors() {
        assert_eq!(cohen_kappa::<u8>(&[], &[]).unwrap_err(), KappaError::Empty);
        assert_eq!(cohen_kappa(&[1], &[1, 2]).unwrap_err(), KappaError::LengthMismatch(1, 2));
        let err = fleiss_kappa(&[vec![1, 1], vec![1, 2, 2], vec![1, 2]]).unwrap_err();
        assert_eq!(err, KappaError::UnequalRaters { expected: 2, offenders: vec![(1, 3)] });
        assert!(matches!(fleiss_kappa(&[vec![1]]), Err(KappaError::TooFewRaters { .. })));
    }

    #[test]
    fn fleiss_total_agreement() {
        let items: Vec<Vec<u8>> = (0..20).map(|i| vec![(i % 2) as u8; 3]).collect();
        assert!((fleiss_kappa(&items).unwrap().value.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fleiss_near_zero_on_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let items: Vec<Vec<u8>> = (0..4000).map(|_| (0..3).map(|_| rng.gen_range(0..4)).collect()).collect();
        let k = fleiss_kappa(&items).unwrap().value.unwrap();
        assert!(k.abs() < 0.05, "{k}");
    }

    #[test]
    fn fleiss_matches_cohen_on_symmetric_data() {
        // Symmetric table: both coders share marginals.
        let (a, b) = expand([[30, 7], [7, 16]]);
        let items: Vec<Vec<u8>> = a.iter().zip(&b).map(|(x, y)| vec![*x, *y]).collect();
        let c = cohen_kappa(&a, &b).unwrap().value.unwrap();
        let f = fleiss_kappa(&items).unwrap().value.unwrap();
        assert!((c - f).abs() < 1e-9, "{c} {f}");
    }

    proptest! {
        #[test]
        fn cohen_matches_oracle_and_bounds(pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..80)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let k = cohen_kappa(&a, &b).unwrap();
            match k.value {
                Some(v) => {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
                    prop_assert!((v - oracle(&a, &b)).abs() < 1e-9);
                    prop_assert_eq!((v - 1.0).abs() < 1e-12, a == b);
                }
                None => prop_assert!((k.expected - 1.0).abs() < 1e-12),
            }
        }

        #[test]
        fn fleiss_bounded(items in proptest::collection::vec(proptest::collection::vec(0u8..3, 3), 1..40)) {
            let k = fleiss_kappa(&items).unwrap();
            if let Some(v) = k.value {
                // Fleiss has a lower bound of -1/(r-1) = -0.5 for three raters.
                prop_assert!((-0.5 - 1e-9..=1.0 + 1e-9).contains(&v));
            }
        }
    }
}
