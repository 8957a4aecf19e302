use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Strategy, StrategyKind};
use crate::corpus::{Corpus, Document};
use crate::gateway::ParseStatus;
use crate::jsonl::{self, AppendLog};
use crate::taxonomy::{LabelId, Taxonomy};

/// Who proposed a label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub backend: String,
    pub kind: StrategyKind,
    pub completion_ids: Vec<String>,
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLabel {
    pub doc_id: String,
    pub label: LabelId,
    pub provenance: Vec<Provenance>,
    pub first_seen: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyFailure {
    pub strategy: String,
    pub backend: String,
    pub error: String,
    #[serde(default)]
    pub unavailable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdResult {
    pub doc_id: String,
    pub candidates: Vec<CandidateLabel>,
    pub failures: Vec<StrategyFailure>,
}

impl CrowdResult {
    pub fn labels(&self) -> Vec<LabelId> {
        self.candidates.iter().map(|c| c.label.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EntryOutcome {
    Labeled {
        labels: Vec<LabelId>,
        parse_status: ParseStatus,
        #[serde(default)]
        fallback: bool,
    },
    Failed {
        error: String,
        #[serde(default)]
        unavailable: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw: Option<String>,
    },
}

/// One executed (document, strategy) pair; the unit of resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdEntry {
    pub doc_id: String,
    pub strategy: String,
    pub backend: String,
    pub kind: StrategyKind,
    pub calls: u32,
    pub completion_ids: Vec<String>,
    pub outcome: EntryOutcome,
    pub timestamp: DateTime<Utc>,
}

impl CrowdEntry {
    fn is_unavailable(&self) -> bool {
        matches!(self.outcome, EntryOutcome::Failed { unavailable: true, .. })
    }
}

#[derive(Debug, Clone)]
pub struct CrowdOptions {
    /// Documents in flight at once.
    pub workers: usize,
    /// Append-only record of executed pairs; enables resume.
    pub journal: Option<PathBuf>,
    /// Consecutive unavailable outcomes per backend before it counts as down.
    /// The run stops once every backend in use is down.
    pub outage_threshold: usize,
}

impl Default for CrowdOptions {
    fn default() -> Self {
        CrowdOptions { workers: 8, journal: None, outage_threshold: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdOutcome {
    /// One per fully attempted document, in corpus order.
    pub results: Vec<CrowdResult>,
    /// Documents with at least one pair still to run (set after a halt).
    pub pending: Vec<String>,
    pub halted: Option<String>,
    /// Pairs run now versus reused from the journal.
    pub executed: usize,
    pub reused: usize,
}

#[derive(Debug, Error)]
pub enum CrowdError {
    #[error("at least one strategy is required")]
    NoStrategies,
    #[error("strategy id `{0}` is used twice")]
    DuplicateStrategy(String),
    #[error("crowd journal: {0}")]
    Journal(#[from] std::io::Error),
}

struct OutageTracker {
    threshold: usize,
    streaks: Mutex<HashMap<String, usize>>,
    halted: AtomicBool,
}

impl OutageTracker {
    fn new(backends: impl IntoIterator<Item = String>, threshold: usize) -> Self {
        OutageTracker {
            threshold: threshold.max(1),
            streaks: Mutex::new(backends.into_iter().map(|b| (b, 0)).collect()),
            halted: AtomicBool::new(false),
        }
    }

    fn record(&self, backend: &str, unavailable: bool) {
        let mut s = self.streaks.lock().expect("outage lock");
        let streak = s.entry(backend.to_string()).or_default();
        *streak = if unavailable { *streak + 1 } else { 0 };
        if s.values().all(|&n| n >= self.threshold) {
            self.halted.store(true, Ordering::SeqCst);
        }
    }

    fn halted(&self) -> bool {
        self.halted.load(Ordering::SeqCst)
    }
}

/// Runs every strategy on every document and merges the proposals.
///
/// Pairs already in the journal are not re-run unless their outcome was a
/// backend outage. Failures are recorded per pair and never abort the batch;
/// the run stops early only when all backends are unavailable.
pub async fn run_crowd(
    corpus: &Corpus,
    strategies: &[Strategy],
    options: &CrowdOptions,
) -> Result<CrowdOutcome, CrowdError> {
    if strategies.is_empty() {
        return Err(CrowdError::NoStrategies);
    }
    let mut ids = HashSet::new();
    for s in strategies {
        if !ids.insert(s.id()) {
            return Err(CrowdError::DuplicateStrategy(s.id()));
        }
    }

    // Latest journaled outcome per pair.
    let mut done: HashMap<(String, String), CrowdEntry> = HashMap::new();
    let log = match &options.journal {
        Some(path) => {
            for e in jsonl::read_all::<CrowdEntry>(path)? {
                done.insert((e.doc_id.clone(), e.strategy.clone()), e);
            }
            Some(AppendLog::open(path)?)
        }
        None => None,
    };
    done.retain(|_, e| !e.is_unavailable());
    let reused = corpus
        .documents()
        .iter()
        .flat_map(|d| strategies.iter().map(move |s| (d.id.clone(), s.id())))
        .filter(|k| done.contains_key(k))
        .count();

    let tracker = OutageTracker::new(strategies.iter().map(|s| s.client().name().to_string()), options.outage_threshold);
    let fresh: Mutex<Vec<CrowdEntry>> = Mutex::new(Vec::new());
    let taxonomy = corpus.taxonomy().clone();

    let work = corpus.documents().iter().filter(|d| strategies.iter().any(|s| !done.contains_key(&(d.id.clone(), s.id()))));
    stream::iter(work)
        .for_each_concurrent(options.workers.max(1), |doc| {
            let (done, tracker, fresh, log, taxonomy) = (&done, &tracker, &fresh, &log, &taxonomy);
            async move {
                for s in strategies {
                    if tracker.halted() {
                        return;
                    }
                    if done.contains_key(&(doc.id.clone(), s.id())) {
                        continue;
                    }
                    let entry = run_pair(s, doc, taxonomy).await;
                    tracker.record(&entry.backend, entry.is_unavailable());
                    if let Some(log) = log {
                        if let Err(e) = log.append(&entry) {
                            tracing::error!(error = %e, "crowd journal append failed");
                        }
                    }
                    fresh.lock().expect("crowd lock").push(entry);
                }
            }
        })
        .await;

    let fresh = fresh.into_inner().expect("crowd lock");
    let executed = fresh.len();
    let mut by_doc: HashMap<String, BTreeMap<String, CrowdEntry>> = HashMap::new();
    for e in done.into_values().chain(fresh) {
        by_doc.entry(e.doc_id.clone()).or_default().insert(e.strategy.clone(), e);
    }

    let halted = tracker.halted();
    let mut results = Vec::new();
    let mut pending = Vec::new();
    for doc in corpus.documents() {
        let entries = by_doc.remove(&doc.id).unwrap_or_default();
        let complete = strategies.iter().all(|s| entries.contains_key(&s.id()));
        // After a halt, pairs lost to the outage are retried on resume.
        let lost = halted && entries.values().any(CrowdEntry::is_unavailable);
        if !complete || lost {
            pending.push(doc.id.clone());
            continue;
        }
        results.push(merge(&doc.id, entries.into_values(), &taxonomy));
    }

    Ok(CrowdOutcome {
        results,
        pending,
        halted: halted.then(|| "all backends unavailable".to_string()),
        executed,
        reused,
    })
}

async fn run_pair(strategy: &Strategy, doc: &Document, taxonomy: &Taxonomy) -> CrowdEntry {
    let outcome = strategy.classify(doc, taxonomy).await;
    let (calls, completion_ids, outcome) = match outcome {
        Ok(c) => (
            c.calls,
            c.completions.iter().map(|r| r.id.clone()).collect(),
            EntryOutcome::Labeled {
                labels: c.parsed.labels,
                parse_status: c.parsed.parse_status,
                fallback: c.fallback,
            },
        ),
        Err(f) => {
            let raw = f.completions.last().map(|r| r.raw_text.clone());
            (
                f.calls,
                f.completions.iter().map(|r| r.id.clone()).collect(),
                EntryOutcome::Failed {
                    error: f.error.to_string(),
                    unavailable: f.error.is_unavailable(),
                    raw,
                },
            )
        }
    };
    CrowdEntry {
        doc_id: doc.id.clone(),
        strategy: strategy.id(),
        backend: strategy.client().name().to_string(),
        kind: strategy.kind(),
        calls,
        completion_ids,
        outcome,
        timestamp: Utc::now(),
    }
}

/// Union of labels across entries, one candidate per label, candidates in
/// taxonomy order and provenance sorted by strategy id.
pub fn merge(doc_id: &str, entries: impl IntoIterator<Item = CrowdEntry>, taxonomy: &Taxonomy) -> CrowdResult {
    let mut cands: HashMap<LabelId, CandidateLabel> = HashMap::new();
    let mut failures = Vec::new();
    for e in entries {
        match e.outcome {
            EntryOutcome::Labeled { labels, fallback, .. } => {
                for label in labels {
                    let p = Provenance {
                        strategy: e.strategy.clone(),
                        backend: e.backend.clone(),
                        kind: e.kind,
                        completion_ids: e.completion_ids.clone(),
                        fallback,
                    };
                    let c = cands.entry(label.clone()).or_insert_with(|| CandidateLabel {
                        doc_id: doc_id.to_string(),
                        label,
                        provenance: Vec::new(),
                        first_seen: e.timestamp,
                    });
                    c.first_seen = c.first_seen.min(e.timestamp);
                    c.provenance.push(p);
                }
            }
            EntryOutcome::Failed { error, unavailable, .. } => failures.push(StrategyFailure {
                strategy: e.strategy,
                backend: e.backend,
                error,
                unavailable,
            }),
        }
    }
    let mut candidates: Vec<CandidateLabel> = cands.into_values().collect();
    for c in &mut candidates {
        c.provenance.sort();
    }
    candidates.sort_by_key(|c| (taxonomy.index_of(&c.label).unwrap_or(usize::MAX), c.label.clone()));
    failures.sort_by(|a, b| a.strategy.cmp(&b.strategy));
    CrowdResult { doc_id: doc_id.to_string(), candidates, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{user_text, MockReply, ScriptedTransport};
    use crate::gateway::{BackendConfig, LlmClient, RetryPolicy, TemplateRegistry};
    use crate::strategies::StrategyConfig;
    use crate::taxonomy::fixtures;
    use crate::strategies::Strategy;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn client(name: &str, t: ScriptedTransport) -> (Arc<LlmClient>, Arc<ScriptedTransport>) {
        let t = Arc::new(t);
        let mut cfg = BackendConfig::named(name);
        cfg.retry = RetryPolicy { max_attempts: 2, backoff_base_ms: 1, backoff_cap_ms: 1 };
        (Arc::new(LlmClient::new(cfg, t.clone()).unwrap()), t)
    }

    fn zs(name: &str, t: ScriptedTransport) -> (Strategy, Arc<ScriptedTransport>) {
        let (c, t) = client(name, t);
        let s = Strategy::new(StrategyConfig::new(StrategyKind::ZeroShot, name), c, &TemplateRegistry::default()).unwrap();
        (s, t)
    }

    fn corpus(n: usize) -> Corpus {
        let docs = (0..n)
            .map(|i| Document { id: format!("d{i}"), text: format!("text {i}"), true_labels: None, source: String::new() })
            .collect();
        Corpus::new(docs, Arc::new(fixtures::cap())).unwrap()
    }

    #[tokio::test]
    async fn three_configs_dedup() {
        let (a, _) = zs("a", ScriptedTransport::constant("Health"));
        let (b, _) = zs("b", ScriptedTransport::constant("Health"));
        let (c, _) = zs("c", ScriptedTransport::constant("Energy"));
        let out = run_crowd(&corpus(1), &[a, b, c], &CrowdOptions::default()).await.unwrap();
        let r = &out.results[0];
        assert_eq!(r.labels(), vec![LabelId::new("3"), LabelId::new("8")]);
        assert_eq!(r.candidates[0].provenance.len(), 2);
        assert_eq!(r.candidates[1].provenance.len(), 1);
        assert!(r.failures.is_empty());
    }

    #[tokio::test]
    async fn failure_on_one_document_is_isolated() {
        let (a, _) = zs(
            "a",
            ScriptedTransport::from_fn(|req| {
                if user_text(req).contains("text 1") {
                    MockReply::Text("Farming".into())
                } else {
                    MockReply::Text("Health".into())
                }
            }),
        );
        let out = run_crowd(&corpus(2), &[a], &CrowdOptions::default()).await.unwrap();
        assert_eq!(out.results[0].labels(), vec![LabelId::new("3")]);
        assert!(out.results[0].failures.is_empty());
        assert!(out.results[1].candidates.is_empty());
        assert_eq!(out.results[1].failures.len(), 1);
    }

    #[tokio::test]
    async fn rerun_with_journal_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CrowdOptions { journal: Some(dir.path().join("crowd.journal")), ..Default::default() };
        let (a, ta) = zs("a", ScriptedTransport::constant("Health"));
        let first = run_crowd(&corpus(5), &[a.clone()], &opts).await.unwrap();
        assert_eq!(ta.sent(), 5);
        let again = run_crowd(&corpus(5), &[a], &opts).await.unwrap();
        assert_eq!(ta.sent(), 5);
        assert_eq!(again.executed, 0);
        assert_eq!(again.reused, 5);
        assert_eq!(again.results, first.results);
    }

    #[tokio::test]
    async fn total_outage_halts_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CrowdOptions {
            journal: Some(dir.path().join("crowd.journal")),
            workers: 1,
            outage_threshold: 3,
        };
        let (down, td) = zs("a", ScriptedTransport::sequence(vec![MockReply::Status(503)]));
        let out = run_crowd(&corpus(10), &[down], &opts).await.unwrap();
        assert!(out.halted.is_some());
        assert!(out.results.is_empty());
        assert_eq!(out.pending.len(), 10);
        assert_eq!(td.sent(), 3 * 2);

        let (up, tu) = zs("a", ScriptedTransport::constant("Energy"));
        let out = run_crowd(&corpus(10), &[up], &opts).await.unwrap();
        assert!(out.halted.is_none());
        assert_eq!(out.results.len(), 10);
        assert_eq!(tu.sent(), 10);
    }

    #[tokio::test]
    async fn one_dead_backend_does_not_halt() {
        let (up, _) = zs("a", ScriptedTransport::constant("Energy"));
        let (down, _) = zs("b", ScriptedTransport::sequence(vec![MockReply::Status(500)]));
        let opts = CrowdOptions { outage_threshold: 2, workers: 1, ..Default::default() };
        let out = run_crowd(&corpus(6), &[up, down], &opts).await.unwrap();
        assert!(out.halted.is_none());
        assert_eq!(out.results.len(), 6);
        for r in &out.results {
            assert_eq!(r.labels(), vec![LabelId::new("8")]);
            assert!(r.failures[0].unavailable);
        }
    }

    #[tokio::test]
    async fn duplicate_strategy_ids_rejected() {
        let (a, _) = zs("a", ScriptedTransport::constant("Health"));
        let err = run_crowd(&corpus(1), &[a.clone(), a], &CrowdOptions::default()).await.unwrap_err();
        assert!(matches!(err, CrowdError::DuplicateStrategy(_)));
    }

    const NAMES: [&str; 5] = ["Health", "Energy", "Agriculture", "Education", "Xyzzy"];

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn dedup_and_order_insensitivity(answers in proptest::collection::vec(0usize..5, 1..5), rot in 0usize..5) {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            let strategies: Vec<Strategy> = answers
                .iter()
                .enumerate()
                .map(|(i, a)| zs(&format!("b{i}"), ScriptedTransport::constant(NAMES[*a])).0)
                .collect();
            let mut rotated = strategies.clone();
            rotated.rotate_left(rot % strategies.len());
            let c = corpus(2);
            let x = rt.block_on(run_crowd(&c, &strategies, &CrowdOptions::default())).unwrap();
            let y = rt.block_on(run_crowd(&c, &rotated, &CrowdOptions::default())).unwrap();
            for (rx, ry) in x.results.iter().zip(&y.results) {
                let labels = rx.labels();
                let unique: HashSet<_> = labels.iter().collect();
                prop_assert_eq!(unique.len(), labels.len());
                for cand in &rx.candidates {
                    let producers = answers.iter().filter(|a| c.taxonomy().resolve_token(NAMES[**a]).as_ref() == Some(&cand.label)).count();
                    prop_assert_eq!(cand.provenance.len(), producers);
                }
                prop_assert_eq!(labels, ry.labels());
                let px: Vec<Vec<String>> = rx.candidates.iter().map(|c| c.provenance.iter().map(|p| p.strategy.clone()).collect()).collect();
                let py: Vec<Vec<String>> = ry.candidates.iter().map(|c| c.provenance.iter().map(|p| p.strategy.clone()).collect()).collect();
                prop_assert_eq!(px, py);
            }
        }
    }
}
