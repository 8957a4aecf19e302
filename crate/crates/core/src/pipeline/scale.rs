use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use futures::stream::{FuturesUnordered, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document};
use crate::gateway::{CompletionRecord, GatewayError, ParseStatus};
use crate::jsonl::{self, AppendLog};
use crate::strategies::{Strategy, StrategyError};
use crate::taxonomy::LabelId;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const COMPLETIONS_FILE: &str = "completions.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleOptions {
    /// Documents recorded between checkpoint writes.
    pub batch_size: usize,
    /// Documents in flight at once. The backend's own limit still applies.
    pub concurrency: usize,
    /// Classification attempts per document before recording a failure.
    pub doc_attempts: u32,
    /// Consecutive unavailable documents that count as an outage.
    pub outage_threshold: usize,
}

impl Default for ScaleOptions {
    fn default() -> Self {
        ScaleOptions { batch_size: 100, concurrency: 8, doc_attempts: 2, outage_threshold: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionStatus {
    Ok,
    Failed,
}

/// One line of `predictions.jsonl`. `id` is the idempotence key; the file
/// doubles as a `{"id", "labels"}` prediction file for the metrics command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub labels: Vec<LabelId>,
    pub status: PredictionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_status: Option<ParseStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub parse_failures: u32,
    #[serde(default)]
    pub completion_ids: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub done: usize,
    pub failed: usize,
    pub retried: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub job_id: String,
    pub strategy: String,
    pub backend: String,
    pub corpus_len: usize,
    /// Length of the corpus-order prefix that is fully recorded.
    pub cursor: usize,
    pub counters: Counters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    pub updated_at: DateTime<Utc>,
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Option<Self>, ScaleError> {
        let path = path.as_ref();
        if !path.exists() {
            return Ok(None);
        }
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map(Some).map_err(|e| ScaleError::Checkpoint(e.to_string()))
    }

    /// Write to a sibling temp file, then rename over the old checkpoint.
    fn store(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?)?;
        std::fs::rename(tmp, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub job_id: String,
    pub total: usize,
    pub counters: Counters,
    /// Already recorded when this run started.
    pub resumed: usize,
    /// Recorded during this run.
    pub processed: usize,
    /// Not yet recorded (non-zero only after a halt).
    pub pending: usize,
    pub cursor: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    pub elapsed_secs: f64,
    /// Documents recorded per second during this run.
    pub throughput: f64,
    /// Totals over every completion journaled for this job.
    pub completions: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
    /// Unparseable answers over classification attempts, across recorded documents.
    pub parse_failure_rate: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("backend failed the health probe: {0}")]
    Unhealthy(#[source] GatewayError),
    #[error("checkpoint belongs to another job: {0}")]
    Mismatch(String),
    #[error("unreadable checkpoint: {0}")]
    Checkpoint(String),
    #[error("predictions file names document `{0}` which is not in the corpus")]
    Foreign(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A resumable batch inference job. All state lives in `dir`.
pub struct ScaleJob {
    pub id: String,
    pub dir: PathBuf,
    pub strategy: Strategy,
    pub options: ScaleOptions,
    halt: Arc<AtomicBool>,
}

impl ScaleJob {
    pub fn new(id: impl Into<String>, dir: impl Into<PathBuf>, strategy: Strategy) -> Self {
        ScaleJob {
            id: id.into(),
            dir: dir.into(),
            strategy,
            options: ScaleOptions::default(),
            halt: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn with_options(mut self, options: ScaleOptions) -> Self {
        self.options = options;
        self
    }

    /// Setting the flag stops new documents from starting; in-flight ones
    /// finish, a checkpoint is written and the run returns as halted.
    pub fn halt_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.halt)
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.dir.join(PREDICTIONS_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn completions_path(&self) -> PathBuf {
        self.dir.join(COMPLETIONS_FILE)
    }
}

enum DocOutcome {
    Recorded(PredictionRecord),
    /// Backend unreachable; leave unrecorded and try again later.
    Deferred { error: String, fatal: bool },
}

async fn process<'a>(
    strategy: &Strategy,
    doc: &'a Document,
    corpus: &Corpus,
    prior: u32,
    attempts: u32,
) -> (&'a Document, DocOutcome, Vec<CompletionRecord>) {
    let mut completions = Vec::new();
    let mut parse_failures = 0;
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        match strategy.classify(doc, corpus.taxonomy()).await {
            Ok(c) => {
                completions.extend(c.completions);
                let record = PredictionRecord {
                    id: doc.id.clone(),
                    labels: c.parsed.labels,
                    status: PredictionStatus::Ok,
                    parse_status: Some(c.parsed.parse_status),
                    error: None,
                    attempts: prior + attempt,
                    parse_failures,
                    completion_ids: completions.iter().map(|r| r.id.clone()).collect(),
                    timestamp: Utc::now(),
                };
                return (doc, DocOutcome::Recorded(record), completions);
            }
            Err(f) => {
                completions.extend(f.completions);
                let fatal = matches!(f.error, StrategyError::Gateway(GatewayError::Config(_)));
                if f.error.is_unavailable() || fatal {
                    return (doc, DocOutcome::Deferred { error: f.error.to_string(), fatal }, completions);
                }
                if matches!(f.error, StrategyError::Unparsed { .. } | StrategyError::FinalChoiceUnparsed { .. }) {
                    parse_failures += 1;
                }
                last_error = f.error.to_string();
            }
        }
    }
    let record = PredictionRecord {
        id: doc.id.clone(),
        labels: Vec::new(),
        status: PredictionStatus::Failed,
        parse_status: (parse_failures > 0).then_some(ParseStatus::Failed),
        error: Some(last_error),
        attempts: prior + attempts,
        parse_failures,
        completion_ids: completions.iter().map(|r| r.id.clone()).collect(),
        timestamp: Utc::now(),
    };
    (doc, DocOutcome::Recorded(record), completions)
}

/// Single writer for predictions, completions and the checkpoint.
struct Writer<'a> {
    job: &'a ScaleJob,
    corpus: &'a Corpus,
    predictions: AppendLog,
    completions: AppendLog,
    recorded: HashSet<String>,
    cursor: usize,
    counters: Counters,
    since_checkpoint: usize,
    processed: usize,
}

impl Writer<'_> {
    fn advance_cursor(&mut self) {
        let docs = self.corpus.documents();
        while self.cursor < docs.len() && self.recorded.contains(&docs[self.cursor].id) {
            self.cursor += 1;
        }
    }

    fn count(&mut self, r: &PredictionRecord) {
        match r.status {
            PredictionStatus::Ok => self.counters.done += 1,
            PredictionStatus::Failed => self.counters.failed += 1,
        }
        if r.attempts > 1 {
            self.counters.retried += 1;
        }
    }

    fn record(&mut self, r: PredictionRecord) -> std::io::Result<()> {
        if !self.recorded.insert(r.id.clone()) {
            return Ok(());
        }
        self.predictions.append(&r)?;
        self.count(&r);
        self.processed += 1;
        self.since_checkpoint += 1;
        self.advance_cursor();
        if self.since_checkpoint >= self.job.options.batch_size.max(1) {
            self.checkpoint(None)?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, halted: Option<String>) -> std::io::Result<()> {
        self.since_checkpoint = 0;
        Checkpoint {
            job_id: self.job.id.clone(),
            strategy: self.job.strategy.id(),
            backend: self.job.strategy.client().name().to_string(),
            corpus_len: self.corpus.len(),
            cursor: self.cursor,
            counters: self.counters,
            halted,
            updated_at: Utc::now(),
        }
        .store(&self.job.checkpoint_path())
    }
}

/// Runs (or resumes) `job` over `corpus`. Documents already present in the
/// predictions file are skipped, so repeated runs converge on exactly one
/// record per document.
pub async fn run_scale(job: &ScaleJob, corpus: &Corpus) -> Result<ScaleSummary, ScaleError> {
    let started = Instant::now();
    job.strategy.client().probe().await.map_err(ScaleError::Unhealthy)?;
    std::fs::create_dir_all(&job.dir)?;

    if let Some(cp) = Checkpoint::load(job.checkpoint_path())? {
        if cp.job_id != job.id || cp.corpus_len != corpus.len() {
            return Err(ScaleError::Mismatch(format!(
                "found job `{}` over {} documents, expected `{}` over {}",
                cp.job_id,
                cp.corpus_len,
                job.id,
                corpus.len()
            )));
        }
    }

    let mut w = Writer {
        job,
        corpus,
        predictions: AppendLog::open(job.predictions_path())?,
        completions: AppendLog::open(job.completions_path())?,
        recorded: HashSet::new(),
        cursor: 0,
        counters: Counters::default(),
        since_checkpoint: 0,
        processed: 0,
    };
    for r in jsonl::read_all::<PredictionRecord>(job.predictions_path())? {
        if corpus.get(&r.id).is_none() {
            return Err(ScaleError::Foreign(r.id));
        }
        if w.recorded.insert(r.id.clone()) {
            w.count(&r);
        }
    }
    w.advance_cursor();
    let resumed = w.recorded.len();

    let stop = AtomicBool::new(false);
    let stopped = |stop: &AtomicBool| stop.load(Ordering::SeqCst) || job.halt.load(Ordering::SeqCst);
    let mut halted: Option<String> = None;
    let mut streak = 0usize;
    let opts = &job.options;

    let mut queue: Vec<&Document> = corpus.documents().iter().filter(|d| !w.recorded.contains(&d.id)).collect();
    // Second pass gives deferred documents one more chance once the rest is done.
    for pass in 0..2u32 {
        if queue.is_empty() || stopped(&stop) {
            break;
        }
        let mut deferred = Vec::new();
        let mut pending = queue.iter().copied();
        let mut in_flight = FuturesUnordered::new();
        loop {
            while in_flight.len() < opts.concurrency.max(1) && !stopped(&stop) {
                let Some(doc) = pending.next() else { break };
                in_flight.push(process(&job.strategy, doc, corpus, pass * opts.doc_attempts, opts.doc_attempts));
            }
            let Some((doc, outcome, completions)) = in_flight.next().await else { break };
            for c in &completions {
                w.completions.append(c)?;
            }
            match outcome {
                DocOutcome::Recorded(r) => {
                    streak = 0;
                    w.record(r)?;
                }
                DocOutcome::Deferred { error, fatal } => {
                    deferred.push(doc);
                    streak += 1;
                    if fatal || streak >= opts.outage_threshold.max(1) {
                        tracing::warn!(job = %job.id, %error, "halting scale job");
                        halted = Some(format!("backend outage: {error}"));
                        stop.store(true, Ordering::SeqCst);
                    } else if pass == 1 && halted.is_none() {
                        halted = Some(format!("backend unavailable: {error}"));
                    }
                }
            }
        }
        queue = deferred;
    }
    if halted.is_none() && job.halt.load(Ordering::SeqCst) && w.recorded.len() < corpus.len() {
        halted = Some("stopped on request".into());
    }
    w.checkpoint(halted.clone())?;

    let elapsed = started.elapsed().as_secs_f64();
    let journal: Vec<CompletionRecord> = jsonl::read_all(job.completions_path())?;
    let records: Vec<PredictionRecord> = jsonl::read_all(job.predictions_path())?;
    let attempts: u64 = records.iter().map(|r| r.attempts as u64).sum();
    let parse_failures: u64 = records.iter().map(|r| r.parse_failures as u64).sum();
    Ok(ScaleSummary {
        job_id: job.id.clone(),
        total: corpus.len(),
        counters: w.counters,
        resumed,
        processed: w.processed,
        pending: corpus.len() - w.recorded.len(),
        cursor: w.cursor,
        halted,
        elapsed_secs: elapsed,
        throughput: if elapsed > 0.0 { w.processed as f64 / elapsed } else { 0.0 },
        completions: journal.len(),
        input_tokens: journal.iter().map(|c| c.input_tokens).sum(),
        output_tokens: journal.iter().map(|c| c.output_tokens).sum(),
        cost: journal.iter().filter_map(|c| c.cost).sum(),
        parse_failure_rate: (attempts > 0).then(|| parse_failures as f64 / attempts as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{user_text, MockReply, ScriptedTransport};
    use crate::gateway::{BackendConfig, LlmClient, Pricing, RetryPolicy, TemplateRegistry};
    use crate::strategies::{StrategyConfig, StrategyKind};
    use crate::taxonomy::fixtures;
    use rand::{Rng, SeedableRng};
    use std::time::Duration;

    fn corpus(n: usize) -> Corpus {
        let docs = (0..n)
            .map(|i| Document { id: format!("doc-{i}"), text: format!("item <{i}>"), true_labels: None, source: String::new() })
            .collect();
        Corpus::new(docs, Arc::new(fixtures::cap())).unwrap()
    }

    fn job(dir: &Path, t: ScriptedTransport, concurrency: usize) -> (ScaleJob, Arc<ScriptedTransport>) {
        let t = Arc::new(t);
        let mut cfg = BackendConfig::named("tuned");
        cfg.max_concurrency = concurrency;
        cfg.fine_tuned = true;
        cfg.retry = RetryPolicy { max_attempts: 2, backoff_base_ms: 1, backoff_cap_ms: 1 };
        cfg.price = Some(Pricing { per_input_token: 0.001, per_output_token: 0.002 });
        let client = Arc::new(LlmClient::new(cfg, t.clone()).unwrap());
        let s = Strategy::new(StrategyConfig::new(StrategyKind::ZeroShot, "tuned"), client, &TemplateRegistry::default()).unwrap();
        let opts = ScaleOptions { concurrency, ..Default::default() };
        (ScaleJob::new("job-1", dir, s).with_options(opts), t)
    }

    fn ids_in(path: &Path) -> Vec<String> {
        jsonl::read_all::<PredictionRecord>(path).unwrap().into_iter().map(|r| r.id).collect()
    }

    fn assert_exactly_once(path: &Path, n: usize) {
        let ids = ids_in(path);
        let unique: HashSet<_> = ids.iter().collect();
        assert_eq!(ids.len(), n, "duplicate or missing lines");
        assert_eq!(unique.len(), n);
    }

    #[tokio::test]
    async fn complete_run_records_every_document() {
        let dir = tempfile::tempdir().unwrap();
        let (j, _) = job(dir.path(), ScriptedTransport::constant("Health"), 4);
        let s = run_scale(&j, &corpus(250)).await.unwrap();
        assert_eq!(s.counters, Counters { done: 250, failed: 0, retried: 0 });
        assert_eq!((s.pending, s.cursor, s.halted.clone()), (0, 250, None));
        assert_exactly_once(&j.predictions_path(), 250);
        let cp = Checkpoint::load(j.checkpoint_path()).unwrap().unwrap();
        assert_eq!(cp.cursor, 250);
        assert_eq!(s.parse_failure_rate, Some(0.0));
    }

    #[tokio::test]
    async fn rerun_after_completion_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let (j, t) = job(dir.path(), ScriptedTransport::constant("Health"), 4);
        run_scale(&j, &corpus(30)).await.unwrap();
        let sent = t.sent();
        let s = run_scale(&j, &corpus(30)).await.unwrap();
        assert_eq!((s.resumed, s.processed), (30, 0));
        assert_eq!(t.sent(), sent + 1, "only the probe");
        assert_exactly_once(&j.predictions_path(), 30);
    }

    #[tokio::test]
    async fn kill_at_500_then_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().to_path_buf();
        let c = Arc::new(corpus(1000));
        let (j, _) = job(&path, ScriptedTransport::constant("Health").with_latency(Duration::from_millis(1)), 4);
        let j = Arc::new(j);
        let (jc, cc) = (j.clone(), c.clone());
        let handle = tokio::spawn(async move { run_scale(&jc, &cc).await });
        while jsonl::count_lines(j.predictions_path()).unwrap_or(0) < 500 {
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
        handle.abort();
        let _ = handle.await;
        let s = run_scale(&j, &c).await.unwrap();
        assert!(s.resumed >= 500);
        assert_eq!(s.resumed + s.processed, 1000);
        assert_exactly_once(&j.predictions_path(), 1000);
    }

    #[tokio::test]
    async fn randomized_kill_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let dir = tempfile::tempdir().unwrap();
            let c = Arc::new(corpus(300));
            let (j, _) = job(dir.path(), ScriptedTransport::constant("Health").with_latency(Duration::from_micros(300)), 8);
            let j = Arc::new(j);
            for _ in 0..3 {
                let (jc, cc) = (j.clone(), c.clone());
                let handle = tokio::spawn(async move { run_scale(&jc, &cc).await });
                tokio::time::sleep(Duration::from_millis(rng.gen_range(1..15))).await;
                handle.abort();
                let _ = handle.await;
                let ids = ids_in(&j.predictions_path());
                assert_eq!(ids.len(), ids.iter().collect::<HashSet<_>>().len());
            }
            let s = run_scale(&j, &c).await.unwrap();
            assert_eq!(s.pending, 0);
            assert_exactly_once(&j.predictions_path(), 300);
        }
    }

    #[tokio::test]
    async fn scripted_failures_are_recorded_not_blocking() {
        let dir = tempfile::tempdir().unwrap();
        // Documents 0, 100, 200, ... answer with nothing usable on every attempt.
        let t = ScriptedTransport::from_fn(|req| {
            let text = user_text(req);
            let bad = (0..1000).step_by(100).any(|i| text.contains(&format!("<{i}>")));
            MockReply::Text(if bad { "no idea".into() } else { "Health".into() })
        });
        let (j, _) = job(dir.path(), t, 8);
        let s = run_scale(&j, &corpus(1000)).await.unwrap();
        assert_eq!(s.counters.failed, 10);
        assert_eq!(s.counters.done, 990);
        assert_eq!(s.counters.retried, 10);
        assert_eq!(s.parse_failure_rate, Some(20.0 / 1010.0));
        assert_exactly_once(&j.predictions_path(), 1000);
    }

    #[tokio::test]
    async fn outage_halts_then_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let up = Arc::new(AtomicBool::new(true));
        let served = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let (u, sv) = (up.clone(), served.clone());
        let t = ScriptedTransport::from_fn(move |_| {
            if sv.fetch_add(1, Ordering::SeqCst) >= 60 {
                u.store(false, Ordering::SeqCst);
            }
            if u.load(Ordering::SeqCst) {
                MockReply::Text("Health".into())
            } else {
                MockReply::Status(503)
            }
        });
        let (j, _) = job(dir.path(), t, 2);
        let s = run_scale(&j, &corpus(200)).await.unwrap();
        assert!(s.halted.as_deref().unwrap().contains("outage"));
        assert!(s.pending > 0);
        assert_eq!(s.counters.failed, 0, "outage documents are not recorded as failures");
        let cp = Checkpoint::load(j.checkpoint_path()).unwrap().unwrap();
        assert!(cp.halted.is_some());
        assert_eq!(cp.cursor, s.cursor);

        let (j, _) = job(dir.path(), ScriptedTransport::constant("Health"), 2);
        let s = run_scale(&j, &corpus(200)).await.unwrap();
        assert_eq!(s.halted, None);
        assert_exactly_once(&j.predictions_path(), 200);
    }

    #[tokio::test]
    async fn unhealthy_backend_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (bad, _) = job(dir.path(), ScriptedTransport::sequence(vec![MockReply::Status(503)]), 1);
        assert!(matches!(run_scale(&bad, &corpus(3)).await, Err(ScaleError::Unhealthy(_))));
        assert!(!bad.predictions_path().exists());
    }

    #[tokio::test]
    async fn halt_flag_stops_early() {
        let dir = tempfile::tempdir().unwrap();
        let (j, _) = job(dir.path(), ScriptedTransport::constant("Health").with_latency(Duration::from_millis(2)), 2);
        let flag = j.halt_handle();
        let j = Arc::new(j);
        let c = Arc::new(corpus(500));
        let (jc, cc) = (j.clone(), c.clone());
        let handle = tokio::spawn(async move { run_scale(&jc, &cc).await });
        tokio::time::sleep(Duration::from_millis(30)).await;
        flag.store(true, Ordering::SeqCst);
        let s = handle.await.unwrap().unwrap();
        assert_eq!(s.halted.as_deref(), Some("stopped on request"));
        assert!(s.pending > 0);
        assert_eq!(Checkpoint::load(j.checkpoint_path()).unwrap().unwrap().cursor, s.cursor);
    }

    #[tokio::test]
    async fn cost_matches_journal() {
        let dir = tempfile::tempdir().unwrap();
        let (j, _) = job(dir.path(), ScriptedTransport::constant("Health").with_usage(120, 3), 4);
        let s = run_scale(&j, &corpus(40)).await.unwrap();
        let journal: Vec<CompletionRecord> = jsonl::read_all(j.completions_path()).unwrap();
        let want: f64 = journal.iter().map(|c| c.cost.unwrap()).sum();
        assert_eq!(s.cost, want);
        assert_eq!(s.completions, 40);
        assert_eq!(s.input_tokens, 40 * 120);
        assert!((s.cost - 40.0 * (0.12 + 0.006)).abs() < 1e-9);
    }

    #[tokio::test]
    async fn mismatched_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (j, _) = job(dir.path(), ScriptedTransport::constant("Health"), 2);
        run_scale(&j, &corpus(5)).await.unwrap();
        assert!(matches!(run_scale(&j, &corpus(6)).await, Err(ScaleError::Mismatch(_))));
    }

    #[tokio::test]
    async fn concurrency_speeds_up() {
        let run = |conc: usize| async move {
            let dir = tempfile::tempdir().unwrap();
            let (j, _) = job(dir.path(), ScriptedTransport::constant("Health").with_latency(Duration::from_millis(10)), conc);
            let t0 = Instant::now();
            run_scale(&j, &corpus(160)).await.unwrap();
            t0.elapsed().as_secs_f64()
        };
        // Best of three trials, to ride out scheduler noise when the suite runs in parallel.
        let mut trials = Vec::new();
        for _ in 0..3 {
            let (serial, parallel) = (run(1).await, run(8).await);
            if serial / parallel >= 6.0 {
                return;
            }
            trials.push(format!("serial {serial:.3}s parallel {parallel:.3}s"));
        }
        panic!("speedup below 6x: {trials:?}");
    }
}
