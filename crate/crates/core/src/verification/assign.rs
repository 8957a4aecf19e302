use std::collections::HashSet;

use chrono::Utc;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Assignment, AssignmentStatus, Coder, VerificationError};

#[derive(Debug, Clone)]
pub struct AssignOptions {
    /// Share of documents coded by more than one coder.
    pub overlap_fraction: f64,
    /// Coders per overlap document.
    pub overlap_coders: usize,
    pub per_coder_cap: usize,
    pub seed: u64,
}

impl Default for AssignOptions {
    fn default() -> Self {
        AssignOptions { overlap_fraction: 0.0, overlap_coders: 2, per_coder_cap: usize::MAX, seed: 0 }
    }
}

/// Spreads `doc_ids` over `coders`. A seeded random `ceil(fraction * n)`
/// documents go to `overlap_coders` distinct coders each, the rest to one.
/// Every pick goes to the least-loaded eligible coder, so loads never differ
/// by more than one. Output is in document order, then coder order.
pub fn assign(doc_ids: &[String], coders: &[Coder], opts: &AssignOptions) -> Result<Vec<Assignment>, VerificationError> {
    if coders.is_empty() {
        return Err(VerificationError::NoCoders);
    }
    if !(0.0..=1.0).contains(&opts.overlap_fraction) {
        return Err(VerificationError::BadOverlap(opts.overlap_fraction));
    }
    let mut seen = HashSet::new();
    for c in coders {
        if !seen.insert(c.id.as_str()) {
            return Err(VerificationError::DuplicateCoder(c.id.clone()));
        }
    }

    let n = doc_ids.len();
    let overlap_docs = ((opts.overlap_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let overlap_docs = overlap_docs.min(n);
    let per_overlap = opts.overlap_coders.max(2);
    if overlap_docs > 0 && coders.len() < per_overlap {
        return Err(VerificationError::TooFewCoders { overlap_docs, per_overlap, coders: coders.len() });
    }
    let single_docs = n - overlap_docs;
    let required = overlap_docs * per_overlap + single_docs;
    let capacity = opts.per_coder_cap.saturating_mul(coders.len());
    if required > capacity {
        return Err(VerificationError::Infeasible {
            overlap_docs,
            per_overlap,
            single_docs,
            required,
            coders: coders.len(),
            cap: opts.per_coder_cap,
            capacity,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // Tie-break between equally loaded coders in a seeded order.
    let mut rank: Vec<usize> = (0..coders.len()).collect();
    rank.shuffle(&mut rng);

    let mut load = vec![0usize; coders.len()];
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (pos, &doc) in order.iter().enumerate() {
        let k = if pos < overlap_docs { per_overlap } else { 1 };
        let mut by_load = rank.clone();
        by_load.sort_by_key(|&c| load[c]);
        for &c in by_load.iter().take(k) {
            debug_assert!(load[c] < opts.per_coder_cap);
            load[c] += 1;
            picks[doc].push(c);
        }
        // Keep rotating the tie-break so the same coder is not always first.
        rank.rotate_left(1);
    }

    let now = Utc::now();
    let mut out = Vec::with_capacity(required);
    for (doc, mut cs) in picks.into_iter().enumerate() {
        cs.sort_unstable();
        let overlap = cs.len() > 1;
        for c in cs {
            out.push(Assignment {
                coder_id: coders[c].id.clone(),
                doc_id: doc_ids[doc].clone(),
                status: AssignmentStatus::Pending,
                assigned_at: now,
                overlap,
            });
        }
    }
    Ok(out)
}
