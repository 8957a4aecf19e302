//! Crowd classification and scale runs as tracked jobs.
//!
//! The CLI runs a job in the foreground; the server spawns it and clients
//! poll its row. Either way the row in `jobs` is the source of truth, and
//! the job directory under `work_dir/jobs/<id>` holds the journals that make
//! a job resumable.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use labelforge_core::corpus::{ingest_jsonl, Corpus};
use labelforge_core::gateway::{BackendConfig, CompletionRecord, GatewayError, LlmClient, TemplateRegistry};
use labelforge_core::jsonl::{self, AppendLog};
use labelforge_core::pipeline::{run_scale, Checkpoint, ScaleJob, ScaleOptions, ScaleSummary};
use labelforge_core::strategies::{run_crowd, CrowdOptions, CrowdOutcome, Strategy, StrategyConfig, StrategyKind};
use labelforge_core::taxonomy::load_taxonomy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AppConfig;
use crate::store::{JobKind, JobRow, JobStatus, Stage, Store, StoreError};

/// Builds a client for a configured backend. Tests swap in mock transports.
pub type ClientFactory = Arc<dyn Fn(&BackendConfig) -> Result<LlmClient, GatewayError> + Send + Sync>;

pub fn http_clients() -> ClientFactory {
    Arc::new(|c| LlmClient::http(c.clone()))
}

const CROWD_JOURNAL: &str = "crowd.jsonl";

#[derive(Debug, Error)]
pub enum JobError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("backend `{0}` is not configured")]
    UnknownBackend(String),
    #[error("backend `{name}`: {source}")]
    Client {
        name: String,
        #[source]
        source: GatewayError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("job `{id}` is a {kind:?} job")]
    WrongKind { id: String, kind: JobKind },
    #[error("job `{0}` is already running")]
    Running(String),
    #[error("crowd run: {0}")]
    Crowd(#[from] labelforge_core::strategies::CrowdError),
    #[error("scale run: {0}")]
    Scale(#[from] labelforge_core::pipeline::ScaleError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdParams {
    pub strategies: Vec<StrategyConfig>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub outage_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    /// Corpus JSONL with the documents to label.
    pub corpus: PathBuf,
    /// Taxonomy file; defaults to the project's taxonomy.
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    pub backend: String,
    #[serde(default = "zero_shot")]
    pub strategy: StrategyKind,
    /// Prompt template id; `finetune` for fine-tuned backends unless set.
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub doc_attempts: Option<u32>,
    #[serde(default)]
    pub outage_threshold: Option<usize>,
}

fn zero_shot() -> StrategyKind {
    StrategyKind::ZeroShot
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrowdReport {
    pub job_id: String,
    pub status: JobStatus,
    pub documents: usize,
    pub executed: usize,
    pub reused: usize,
    pub pending: usize,
    pub candidates: usize,
    pub failures: usize,
    pub completions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halted: Option<String>,
    #[serde(skip)]
    pub outcome: CrowdOutcome,
}

/// Owns the store, configuration and client construction for jobs, plus
/// the halt flags of scale jobs running in this process.
#[derive(Clone)]
pub struct Runner {
    pub store: Arc<Store>,
    pub config: Arc<AppConfig>,
    clients: ClientFactory,
    templates: Arc<TemplateRegistry>,
    halts: Arc<Mutex<HashMap<String, Arc<AtomicBool>>>>,
}

impl Runner {
    pub fn new(store: Arc<Store>, config: Arc<AppConfig>, clients: ClientFactory) -> Result<Self, JobError> {
        let mut templates = TemplateRegistry::default();
        for path in &config.templates {
            templates
                .load_file(path)
                .map_err(|e| JobError::Invalid(format!("template {}: {e}", path.display())))?;
        }
        Ok(Runner { store, config, clients, templates: Arc::new(templates), halts: Arc::default() })
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.config.work_dir.join("jobs").join(id)
    }

    fn client(&self, backend: &str, journal: Option<Arc<AppendLog>>) -> Result<Arc<LlmClient>, JobError> {
        let config = self.config.backend(backend).ok_or_else(|| JobError::UnknownBackend(backend.to_string()))?;
        let client = (self.clients)(config).map_err(|source| JobError::Client { name: backend.to_string(), source })?;
        Ok(Arc::new(match journal {
            Some(j) => client.with_journal(j),
            None => client,
        }))
    }

    fn check_strategies(&self, params: &CrowdParams) -> Result<(), JobError> {
        if params.strategies.is_empty() {
            return Err(JobError::Invalid("at least one strategy is required".into()));
        }
        for s in &params.strategies {
            if self.config.backend(&s.backend).is_none() {
                return Err(JobError::UnknownBackend(s.backend.clone()));
            }
        }
        Ok(())
    }

    /// Records a queued crowd job for `project`.
    pub fn create_crowd(&self, project: &str, params: &CrowdParams) -> Result<JobRow, JobError> {
        self.check_strategies(params)?;
        let project = self.store.project(project)?;
        let assigned = self.store.assignments(&project.id)?.len();
        if assigned > 0 {
            return Err(StoreError::Conflict("documents are already assigned for review; candidates are frozen".into()).into());
        }
        let value = serde_json::to_value(params).map_err(|e| JobError::Invalid(e.to_string()))?;
        Ok(self.store.create_job(Some(&project.id), JobKind::Crowd, None, &value)?)
    }

    /// Runs (or resumes) a crowd job: classifies the project corpus, stores
    /// the merged candidates and the completions, and advances the stage
    /// unless the run halted.
    pub async fn execute_crowd(&self, job_id: &str) -> Result<CrowdReport, JobError> {
        let job = self.store.job(job_id)?;
        if job.kind != JobKind::Crowd {
            return Err(JobError::WrongKind { id: job.id, kind: job.kind });
        }
        let result = self.crowd_inner(&job).await;
        if let Err(e) = &result {
            self.store.update_job(&job.id, JobStatus::Failed, None, Some(&e.to_string()))?;
        }
        result
    }

    async fn crowd_inner(&self, job: &JobRow) -> Result<CrowdReport, JobError> {
        let params: CrowdParams = serde_json::from_value(job.params.clone()).map_err(|e| JobError::Invalid(e.to_string()))?;
        self.check_strategies(&params)?;
        let project_id = job.project_id.clone().ok_or_else(|| JobError::Invalid("crowd job without project".into()))?;
        let project = self.store.project(&project_id)?;
        let corpus = self.store.corpus(&project)?;
        let dir = self.job_dir(&job.id);
        std::fs::create_dir_all(&dir)?;
        let completions_path = dir.join(labelforge_core::pipeline::COMPLETIONS_FILE);
        let journal = Arc::new(AppendLog::open(&completions_path)?);

        let backends: BTreeSet<&str> = params.strategies.iter().map(|s| s.backend.as_str()).collect();
        let mut clients = Vec::new();
        for b in backends {
            clients.push(self.client(b, Some(Arc::clone(&journal)))?);
        }
        let strategies = params
            .strategies
            .iter()
            .map(|c| Strategy::resolve(c.clone(), &clients, &self.templates).map_err(|e| JobError::Invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let options = CrowdOptions {
            workers: params.workers.unwrap_or(self.config.defaults.workers),
            journal: Some(dir.join(CROWD_JOURNAL)),
            outage_threshold: params.outage_threshold.unwrap_or(self.config.defaults.outage_threshold),
        };
        self.store.update_job(
            &job.id,
            JobStatus::Running,
            Some(&serde_json::json!({"documents": corpus.len(), "pairs_total": corpus.len() * strategies.len()})),
            None,
        )?;
        let outcome = run_crowd(&corpus, &strategies, &options).await?;

        let candidates = self.store.save_candidates(&project.id, &outcome.results)?;
        let records: Vec<CompletionRecord> = jsonl::read_all(&completions_path)?;
        self.store.insert_completions(Some(&project.id), Some(&job.id), &records)?;
        let status = if outcome.halted.is_some() { JobStatus::Halted } else { JobStatus::Completed };
        let report = CrowdReport {
            job_id: job.id.clone(),
            status,
            documents: corpus.len(),
            executed: outcome.executed,
            reused: outcome.reused,
            pending: outcome.pending.len(),
            candidates,
            failures: outcome.results.iter().map(|r| r.failures.len()).sum(),
            completions: records.len(),
            halted: outcome.halted.clone(),
            outcome,
        };
        let progress = serde_json::to_value(&report).map_err(|e| JobError::Invalid(e.to_string()))?;
        if status == JobStatus::Completed && project.stage <= Stage::CrowdDone {
            self.store.advance_stage(
                &project.id,
                Stage::CrowdDone,
                &serde_json::json!({"job": job.id, "strategies": params.strategies}),
            )?;
        }
        self.store.update_job(&job.id, status, Some(&progress), report.halted.as_deref())?;
        Ok(report)
    }

    /// Records a queued scale job. `id` lets callers choose a stable name.
    pub fn create_scale(&self, project: Option<&str>, id: Option<&str>, params: &ScaleParams) -> Result<JobRow, JobError> {
        if self.config.backend(&params.backend).is_none() {
            return Err(JobError::UnknownBackend(params.backend.clone()));
        }
        let project_id = project.map(|p| self.store.project(p)).transpose()?.map(|p| p.id);
        if params.taxonomy.is_none() && project_id.is_none() {
            return Err(JobError::Invalid("scale needs a taxonomy file or a project".into()));
        }
        let value = serde_json::to_value(params).map_err(|e| JobError::Invalid(e.to_string()))?;
        Ok(self.store.create_job(project_id.as_deref(), JobKind::Scale, id, &value)?)
    }

    /// Stops a running scale job after its in-flight documents.
    pub fn halt(&self, job_id: &str) -> bool {
        match self.halts.lock().unwrap_or_else(|p| p.into_inner()).get(job_id) {
            Some(flag) => {
                flag.store(true, Ordering::SeqCst);
                true
            }
            None => false,
        }
    }

    fn scale_job(&self, job: &JobRow, params: &ScaleParams) -> Result<(ScaleJob, Corpus), JobError> {
        let taxonomy = match (&params.taxonomy, &job.project_id) {
            (Some(path), _) => Arc::new(load_taxonomy(path).map_err(|e| JobError::Invalid(e.to_string()))?),
            (None, Some(p)) => {
                let project = self.store.project(p)?;
                self.store.project_taxonomy(&project)?
            }
            (None, None) => return Err(JobError::Invalid("scale needs a taxonomy file or a project".into())),
        };
        let ingested = ingest_jsonl(&params.corpus, taxonomy).map_err(|e| JobError::Invalid(e.to_string()))?;
        let backend = self.config.backend(&params.backend).ok_or_else(|| JobError::UnknownBackend(params.backend.clone()))?;
        let template = params.template.clone().or_else(|| backend.fine_tuned.then(|| "finetune".to_string()));
        let mut strategy = StrategyConfig::new(params.strategy, &params.backend);
        if let Some(t) = template {
            match params.strategy {
                StrategyKind::ZeroShot => strategy.templates.zero_shot = Some(t),
                StrategyKind::Direct => strategy.templates.direct = Some(t),
                StrategyKind::Iterative => {
                    return Err(JobError::Invalid("a template override applies to zero_shot or direct strategies".into()))
                }
            }
        }
        let client = self.client(&params.backend, None)?;
        let strategy = Strategy::new(strategy, client, &self.templates).map_err(|e| JobError::Invalid(e.to_string()))?;
        let d = &self.config.defaults;
        let options = ScaleOptions {
            batch_size: params.batch_size.unwrap_or(d.batch_size),
            concurrency: params.concurrency.unwrap_or(d.concurrency),
            doc_attempts: params.doc_attempts.unwrap_or(d.doc_attempts),
            outage_threshold: params.outage_threshold.unwrap_or(d.outage_threshold),
        };
        Ok((ScaleJob::new(job.id.clone(), self.job_dir(&job.id), strategy).with_options(options), ingested.corpus))
    }

    /// Runs or resumes a scale job from its checkpoint.
    pub async fn execute_scale(&self, job_id: &str) -> Result<ScaleSummary, JobError> {
        let job = self.store.job(job_id)?;
        if job.kind != JobKind::Scale {
            return Err(JobError::WrongKind { id: job.id, kind: job.kind });
        }
        let result = self.scale_inner(&job).await;
        if let Err(e) = &result {
            self.store.update_job(&job.id, JobStatus::Failed, None, Some(&e.to_string()))?;
        }
        result
    }

    async fn scale_inner(&self, job: &JobRow) -> Result<ScaleSummary, JobError> {
        let params: ScaleParams = serde_json::from_value(job.params.clone()).map_err(|e| JobError::Invalid(e.to_string()))?;
        let (scale, corpus) = self.scale_job(job, &params)?;
        {
            let mut halts = self.halts.lock().unwrap_or_else(|p| p.into_inner());
            if halts.contains_key(&job.id) {
                return Err(JobError::Running(job.id.clone()));
            }
            halts.insert(job.id.clone(), scale.halt_handle());
        }
        self.store.update_job(&job.id, JobStatus::Running, None, None)?;
        if let Some(p) = &job.project_id {
            let project = self.store.project(p)?;
            if project.stage == Stage::Exported {
                self.store.advance_stage(p, Stage::Scaling, &serde_json::json!({"job": job.id, "params": params}))?;
            }
        }
        let result = run_scale(&scale, &corpus).await;
        self.halts.lock().unwrap_or_else(|p| p.into_inner()).remove(&job.id);
        let summary = result?;
        let records: Vec<CompletionRecord> = jsonl::read_all(scale.completions_path())?;
        self.store.insert_completions(job.project_id.as_deref(), Some(&job.id), &records)?;
        let status = if summary.halted.is_some() { JobStatus::Halted } else { JobStatus::Completed };
        let progress = serde_json::to_value(&summary).map_err(|e| JobError::Invalid(e.to_string()))?;
        self.store.update_job(&job.id, status, Some(&progress), summary.halted.as_deref())?;
        Ok(summary)
    }

    /// The stored row, with live counters read from the job directory while
    /// the job is running.
    pub fn status(&self, job_id: &str) -> Result<JobRow, JobError> {
        let mut job = self.store.job(job_id)?;
        if job.status == JobStatus::Running {
            let dir = self.job_dir(&job.id);
            let live = match job.kind {
                JobKind::Crowd => live_crowd(&dir, job.progress.as_ref()),
                JobKind::Scale => Checkpoint::load(dir.join(labelforge_core::pipeline::CHECKPOINT_FILE))
                    .ok()
                    .flatten()
                    .and_then(|cp| serde_json::to_value(cp).ok()),
            };
            if live.is_some() {
                job.progress = live;
            }
        }
        Ok(job)
    }
}

fn live_crowd(dir: &Path, stored: Option<&serde_json::Value>) -> Option<serde_json::Value> {
    let done = jsonl::count_lines(dir.join(CROWD_JOURNAL)).ok()?;
    let mut v = stored.cloned().unwrap_or_else(|| serde_json::json!({}));
    v["pairs_done"] = serde_json::json!(done);
    Some(v)
}
