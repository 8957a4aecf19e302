use std::collections::{BTreeMap, HashMap};

use chrono::Utc;

use super::{
    Assignment, AssignmentStatus, Decision, ResolutionPolicy, ResolvedDocument, VerificationError,
    VerificationRecord,
};
use crate::taxonomy::LabelId;

/// A coder's answer for one document, before validation.
#[derive(Debug, Clone, Default)]
pub struct Submission {
    pub decisions: BTreeMap<LabelId, Decision>,
    /// Marks every shown candidate rejected; explicit keeps are an error.
    pub none_apply: bool,
    /// Replace this coder's current record instead of failing.
    pub supersede: bool,
}

impl Submission {
    pub fn new(decisions: impl IntoIterator<Item = (LabelId, Decision)>) -> Self {
        Submission { decisions: decisions.into_iter().collect(), ..Default::default() }
    }

    pub fn none_apply() -> Self {
        Submission { none_apply: true, ..Default::default() }
    }

    pub fn superseding(mut self) -> Self {
        self.supersede = true;
        self
    }
}

/// In-memory review state: candidates shown per document, assignments and
/// the append-only list of records.
#[derive(Debug, Clone, Default)]
pub struct ReviewLedger {
    candidates: HashMap<String, Vec<LabelId>>,
    assignments: Vec<Assignment>,
    records: Vec<VerificationRecord>,
}

impl ReviewLedger {
    pub fn new(candidates: HashMap<String, Vec<LabelId>>, assignments: Vec<Assignment>) -> Self {
        ReviewLedger { candidates, assignments, records: Vec::new() }
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn assignments_for<'a>(&'a self, coder: &'a str) -> impl Iterator<Item = &'a Assignment> + 'a {
        self.assignments.iter().filter(move |a| a.coder_id == coder)
    }

    /// Every record ever submitted, superseded ones included.
    pub fn records(&self) -> &[VerificationRecord] {
        &self.records
    }

    pub fn candidates(&self, doc: &str) -> Option<&[LabelId]> {
        self.candidates.get(doc).map(Vec::as_slice)
    }

    pub fn submit(&mut self, coder: &str, doc: &str, sub: Submission) -> Result<VerificationRecord, VerificationError> {
        let shown = self
            .candidates
            .get(doc)
            .ok_or_else(|| VerificationError::UnknownDocument(doc.to_string()))?;
        let idx = self
            .assignments
            .iter()
            .position(|a| a.coder_id == coder && a.doc_id == doc)
            .ok_or_else(|| VerificationError::NotAssigned { coder: coder.into(), doc: doc.into() })?;
        let previous = self.current_record(coder, doc).map(|r| r.id.clone());
        match (self.assignments[idx].status, sub.supersede) {
            (AssignmentStatus::Submitted, false) => {
                return Err(VerificationError::AlreadySubmitted { coder: coder.into(), doc: doc.into() })
            }
            (AssignmentStatus::Pending, true) => {
                return Err(VerificationError::Validation("nothing to supersede: no earlier submission".into()))
            }
            _ => {}
        }
        let decisions = validate_decisions(shown, sub.decisions, sub.none_apply)?;
        let record = VerificationRecord {
            id: uuid::Uuid::new_v4().to_string(),
            coder_id: coder.to_string(),
            doc_id: doc.to_string(),
            decisions,
            none_apply: sub.none_apply,
            submitted_at: Utc::now(),
            supersedes: previous,
        };
        self.records.push(record.clone());
        self.assignments[idx].status = AssignmentStatus::Submitted;
        Ok(record)
    }

    fn current_record(&self, coder: &str, doc: &str) -> Option<&VerificationRecord> {
        self.records.iter().rev().find(|r| r.coder_id == coder && r.doc_id == doc)
    }

    /// Latest record per coder for `doc`.
    pub fn current_records(&self, doc: &str) -> Vec<&VerificationRecord> {
        let superseded: std::collections::HashSet<&str> =
            self.records.iter().filter_map(|r| r.supersedes.as_deref()).collect();
        self.records
            .iter()
            .filter(|r| r.doc_id == doc && !superseded.contains(r.id.as_str()))
            .collect()
    }

    /// Latest record per (coder, document) across the ledger.
    pub fn all_current(&self) -> Vec<&VerificationRecord> {
        let superseded: std::collections::HashSet<&str> =
            self.records.iter().filter_map(|r| r.supersedes.as_deref()).collect();
        self.records.iter().filter(|r| !superseded.contains(r.id.as_str())).collect()
    }

    pub fn resolve(
        &self,
        doc: &str,
        policy: ResolutionPolicy,
        exclusive: bool,
    ) -> Result<ResolvedDocument, VerificationError> {
        let shown = self
            .candidates
            .get(doc)
            .ok_or_else(|| VerificationError::UnknownDocument(doc.to_string()))?;
        let pending: Vec<String> = self
            .assignments
            .iter()
            .filter(|a| a.doc_id == doc && a.status == AssignmentStatus::Pending)
            .map(|a| a.coder_id.clone())
            .collect();
        if !pending.is_empty() {
            return Err(VerificationError::NotReady { doc: doc.to_string(), pending });
        }
        let records: Vec<VerificationRecord> = self.current_records(doc).into_iter().cloned().collect();
        Ok(resolve(doc, shown, &records, policy, exclusive))
    }
}

/// Checks that `decisions` covers exactly `shown`. With `none_apply` the
/// map may be empty and is filled with rejections.
pub fn validate_decisions(
    shown: &[LabelId],
    mut decisions: BTreeMap<LabelId, Decision>,
    none_apply: bool,
) -> Result<BTreeMap<LabelId, Decision>, VerificationError> {
    if none_apply {
        if let Some((l, _)) = decisions.iter().find(|(_, d)| **d == Decision::Keep) {
            return Err(VerificationError::Validation(format!(
                "label `{l}` is kept although no candidate was marked as applying"
            )));
        }
        for l in shown {
            decisions.entry(l.clone()).or_insert(Decision::Reject);
        }
    }
    let extra: Vec<String> = decisions.keys().filter(|l| !shown.contains(l)).map(|l| l.to_string()).collect();
    if !extra.is_empty() {
        return Err(VerificationError::Validation(format!("labels not shown for this document: {extra:?}")));
    }
    let missing: Vec<String> = shown.iter().filter(|l| !decisions.contains_key(*l)).map(|l| l.to_string()).collect();
    if !missing.is_empty() {
        return Err(VerificationError::Validation(format!("missing decisions for {missing:?}")));
    }
    Ok(decisions)
}

/// Applies `policy` to the current `records` of one document. Only labels in
/// `candidates` can survive; on an exclusive taxonomy more than one survivor
/// sets `conflict` and all of them are kept for adjudication.
pub fn resolve(
    doc_id: &str,
    candidates: &[LabelId],
    records: &[VerificationRecord],
    policy: ResolutionPolicy,
    exclusive: bool,
) -> ResolvedDocument {
    let mut surviving = Vec::new();
    for label in candidates {
        let votes: Vec<Decision> = records.iter().filter_map(|r| r.decisions.get(label).copied()).collect();
        let rejects = votes.iter().filter(|d| **d == Decision::Reject).count();
        let keeps = votes.len() - rejects;
        let survives = match policy {
            ResolutionPolicy::AnyRejectDrops => rejects == 0,
            ResolutionPolicy::MajorityRejectDrops => rejects * 2 <= votes.len(),
            ResolutionPolicy::UnanimousKeep => !records.is_empty() && keeps == records.len(),
        };
        if survives {
            surviving.push(label.clone());
        }
    }
    let none_apply = surviving.is_empty() && records.iter().any(|r| r.none_apply);
    ResolvedDocument {
        doc_id: doc_id.to_string(),
        conflict: exclusive && surviving.len() > 1,
        surviving_labels: surviving,
        policy,
        records: records.iter().map(|r| r.id.clone()).collect(),
        none_apply,
    }
}
