//! Human verification: coders reject inapplicable AI-proposed labels.
//!
//! [`assign`] distributes documents to coders with a seeded overlap set used
//! for inter-coder reliability. [`ReviewLedger`] enforces the review state
//! machine in memory; the server persists the same records. [`resolve`]
//! turns the current records for a document into its surviving labels.

mod assign;
mod kappa;
mod review;

pub use assign::{assign, AssignOptions};
pub use kappa::{
    cohen_from_table, cohen_kappa, exclusive_category, fleiss_kappa, per_label_kappa, reliability, Category,
    Kappa, KappaError, LabelKappa, PairKappa, ReliabilityReport,
};
pub use review::{resolve, validate_decisions, ReviewLedger, Submission};

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::LabelId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoderRole {
    Expert,
    Trained,
    Crowd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coder {
    pub id: String,
    pub display_name: String,
    pub role: CoderRole,
}

impl Coder {
    pub fn new(id: impl Into<String>, role: CoderRole) -> Self {
        let id = id.into();
        Coder { display_name: id.clone(), id, role }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStatus {
    Pending,
    Submitted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub coder_id: String,
    pub doc_id: String,
    pub status: AssignmentStatus,
    pub assigned_at: DateTime<Utc>,
    /// Part of the reliability overlap set.
    #[serde(default)]
    pub overlap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Reject,
}

/// One coder's decisions on one document. Never edited: a correction is a
/// new record pointing at the one it replaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub id: String,
    pub coder_id: String,
    pub doc_id: String,
    pub decisions: BTreeMap<LabelId, Decision>,
    /// The coder marked that no candidate applies.
    #[serde(default)]
    pub none_apply: bool,
    pub submitted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<String>,
}

impl VerificationRecord {
    pub fn kept(&self) -> Vec<LabelId> {
        self.decisions
            .iter()
            .filter(|(_, d)| **d == Decision::Keep)
            .map(|(l, _)| l.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionPolicy {
    /// A label survives only if no record rejects it.
    #[default]
    AnyRejectDrops,
    /// A label is dropped when more than half of the records covering it
    /// reject it.
    MajorityRejectDrops,
    /// A label survives only if it was shown in every record and kept in all
    /// of them.
    UnanimousKeep,
}

impl std::str::FromStr for ResolutionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any_reject_drops" => Ok(ResolutionPolicy::AnyRejectDrops),
            "majority_reject_drops" => Ok(ResolutionPolicy::MajorityRejectDrops),
            "unanimous_keep" => Ok(ResolutionPolicy::UnanimousKeep),
            other => Err(format!(
                "unknown policy `{other}` (expected any_reject_drops, majority_reject_drops or unanimous_keep)"
            )),
        }
    }
}

impl std::fmt::Display for ResolutionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResolutionPolicy::AnyRejectDrops => "any_reject_drops",
            ResolutionPolicy::MajorityRejectDrops => "majority_reject_drops",
            ResolutionPolicy::UnanimousKeep => "unanimous_keep",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedDocument {
    pub doc_id: String,
    pub surviving_labels: Vec<LabelId>,
    pub policy: ResolutionPolicy,
    /// Ids of the records that were considered.
    pub records: Vec<String>,
    /// Exclusive taxonomy with more than one survivor; needs adjudication.
    #[serde(default)]
    pub conflict: bool,
    /// Nothing survived and at least one coder said no candidate applies.
    #[serde(default)]
    pub none_apply: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum VerificationError {
    #[error("no coders given")]
    NoCoders,
    #[error("overlap fraction {0} is outside [0, 1]")]
    BadOverlap(f64),
    #[error("duplicate coder id `{0}`")]
    DuplicateCoder(String),
    #[error(
        "cannot place {required} assignments: {overlap_docs} overlap documents x {per_overlap} coders + \
         {single_docs} single documents = {required}, but {coders} coders x cap {cap} = {capacity}"
    )]
    Infeasible {
        overlap_docs: usize,
        per_overlap: usize,
        single_docs: usize,
        required: usize,
        coders: usize,
        cap: usize,
        capacity: usize,
    },
    #[error("{overlap_docs} overlap documents need {per_overlap} coders each but only {coders} exist")]
    TooFewCoders { overlap_docs: usize, per_overlap: usize, coders: usize },
    #[error("coder `{coder}` has no assignment for document `{doc}`")]
    NotAssigned { coder: String, doc: String },
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("invalid review: {0}")]
    Validation(String),
    #[error("coder `{coder}` already submitted document `{doc}`; resubmit as a superseding record")]
    AlreadySubmitted { coder: String, doc: String },
    #[error("document `{doc}` still has pending assignments for {pending:?}")]
    NotReady { doc: String, pending: Vec<String> },
}
