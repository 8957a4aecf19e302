//! `labelforge` command line: one subcommand per workflow operation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use labelforge_core::corpus::{ingest_csv, ingest_jsonl, CsvMapping, Ingested};
use labelforge_core::jsonl;
use labelforge_core::metrics::{evaluate, render_markdown, MetricsReport, Mode, PredictionSet};
use labelforge_core::pipeline::{
    evaluate_run, export_finetune, ExportOptions, PredictedLabels, PredictionRecord, PREDICTIONS_FILE,
};
use labelforge_core::strategies::{StrategyConfig, StrategyKind};
use labelforge_core::taxonomy::{load_taxonomy, LabelId, Taxonomy};
use labelforge_core::verification::{assign, AssignOptions, Coder, CoderRole, ResolutionPolicy};
use serde::{Deserialize, Serialize};

use crate::api::{self, AppState};
use crate::config::AppConfig;
use crate::jobs::{http_clients, ClientFactory, CrowdParams, Runner, ScaleParams};
use crate::store::{self, JobKind, JobStatus, Stage, Store};

#[derive(Debug, Parser)]
#[command(name = "labelforge", version, about = "Build labeled text datasets with LLM proposals and human verification")]
pub struct Cli {
    /// Config file (TOML). Defaults to ./labelforge.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store file; overrides the config.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or upgrade the store schema.
    Migrate,
    /// Load a CSV or JSONL corpus into a new project.
    Ingest(IngestArgs),
    /// Run the crowd of strategies over a project's corpus.
    Classify(ClassifyArgs),
    /// Register coders and distribute documents for review.
    Assign(AssignArgs),
    /// Serve the HTTP API and web UI.
    Serve(ServeArgs),
    /// Apply the resolution policy to submitted reviews.
    Resolve(ResolveArgs),
    /// Write instruction-tuning train/test files from resolved labels.
    ExportFinetune(ExportArgs),
    /// Label a large corpus with checkpointed batch inference.
    Scale(ScaleArgs),
    /// Score predictions against ground truth.
    Metrics(MetricsArgs),
    /// Score a scale run against a gold corpus.
    Evaluate(EvaluateArgs),
    /// Inter-coder agreement on the overlap set.
    Reliability(ProjectArg),
}

#[derive(Debug, Args)]
pub struct ProjectArg {
    /// Project name or id.
    #[arg(long)]
    pub project: String,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["csv", "jsonl"]))]
pub struct IngestArgs {
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
    /// Taxonomy file (TOML or JSON).
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Project name; defaults to the corpus file stem.
    #[arg(long)]
    pub project: Option<String>,
    #[arg(long, default_value = "id")]
    pub id_col: String,
    #[arg(long, default_value = "text")]
    pub text_col: String,
    #[arg(long)]
    pub label_col: Option<String>,
    #[arg(long, default_value_t = ';')]
    pub label_delim: char,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub project: String,
    /// Strategy kinds (zero_shot, direct, iterative); each runs on every backend.
    #[arg(long = "strategy", required = true)]
    pub strategies: Vec<StrategyKind>,
    /// Configured backend names.
    #[arg(long = "backend", required = true)]
    pub backends: Vec<String>,
    /// Also write one CrowdResult per line here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue an earlier classify job from its journal.
    #[arg(long)]
    pub resume: Option<String>,
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    #[arg(long)]
    pub project: String,
    /// Coder as `id` or `id:role` (role: expert, trained, crowd).
    #[arg(long = "coder", required = true)]
    pub coders: Vec<String>,
    /// Share of documents reviewed by several coders.
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub overlap_coders: Option<usize>,
    /// Maximum documents per coder.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ResolveArgs {
    #[arg(long)]
    pub project: String,
    #[arg(long)]
    pub policy: Option<ResolutionPolicy>,
    /// Write resolved.jsonl here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub project: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "finetune")]
    pub template: String,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One single-label example per surviving label.
    #[arg(long)]
    pub per_label_replication: bool,
    /// Keep documents where no label survived.
    #[arg(long)]
    pub include_empty: bool,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Corpus JSONL to label.
    #[arg(long, required_unless_present = "resume")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    pub backend: Option<String>,
    #[arg(long, default_value = "zero_shot")]
    pub strategy: StrategyKind,
    #[arg(long)]
    pub template: Option<String>,
    /// Attach the job to a project.
    #[arg(long)]
    pub project: Option<String>,
    /// Job id for a new run.
    #[arg(long, conflicts_with = "resume")]
    pub job: Option<String>,
    /// Resume an interrupted job.
    #[arg(long)]
    pub resume: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Predictions JSONL: {"id", "labels"}.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth JSONL: {"id", "true_labels"}.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Defaults to exclusive for exclusive taxonomies, else multilabel.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Write the report to a .json or .md file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Row name in the summary table.
    #[arg(long, default_value = "test")]
    pub set_name: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Scale job id, job directory or predictions file.
    #[arg(long)]
    pub run: String,
    /// Gold corpus JSONL with true_labels.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub set_name: String,
}

/// Result of a command in both output modes.
#[derive(Debug)]
pub struct Output {
    pub json: serde_json::Value,
    pub text: String,
}

impl Output {
    fn new(json: impl Serialize, text: impl Into<String>) -> Self {
        Output { json: serde_json::to_value(json).unwrap_or(serde_json::Value::Null), text: text.into() }
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut config = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None if Path::new("labelforge.toml").exists() => AppConfig::load("labelforge.toml")?,
        None => AppConfig::default(),
    };
    if let Some(s) = &cli.store {
        config.store = s.clone();
    }
    Ok(config)
}

fn open_store(config: &AppConfig) -> Result<Arc<Store>> {
    let (store, report) = Store::open(&config.store).with_context(|| format!("opening store {}", config.store.display()))?;
    if report.applied() > 0 {
        tracing::info!("store migrated from version {} to {}", report.from, report.to);
    }
    Ok(Arc::new(store))
}

/// Parses `argv` and runs the command with HTTP backends.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let json = cli.json;
    match runtime.block_on(run(cli, http_clients())) {
        Ok(out) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).unwrap_or_default());
            } else if !out.text.is_empty() {
                println!("{}", out.text.trim_end());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if json {
                println!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Runs one parsed command. `clients` builds backend clients.
pub async fn run(cli: Cli, clients: ClientFactory) -> Result<Output> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Migrate => migrate(&config),
        Command::Metrics(a) => metrics(a),
        Command::Evaluate(a) => {
            let store = if a.taxonomy.is_none() { Some(open_store(&config)?) } else { None };
            evaluate_cmd(a, store.as_deref(), &config)
        }
        command => {
            let store = open_store(&config)?;
            let runner = Runner::new(store, Arc::new(config), clients)?;
            match command {
                Command::Ingest(a) => ingest(&runner, a),
                Command::Classify(a) => classify(&runner, a).await,
                Command::Assign(a) => assign_cmd(&runner, a),
                Command::Serve(a) => serve(runner, a).await,
                Command::Resolve(a) => resolve_cmd(&runner, a),
                Command::ExportFinetune(a) => export(&runner, a),
                Command::Scale(a) => scale(&runner, a).await,
                Command::Reliability(a) => reliability_cmd(&runner, a),
                Command::Migrate | Command::Metrics(_) | Command::Evaluate(_) => unreachable!(),
            }
        }
    }
}

fn migrate(config: &AppConfig) -> Result<Output> {
    let (_, report) = Store::open(&config.store).with_context(|| format!("migrating {}", config.store.display()))?;
    let text = if report.applied() == 0 {
        format!("{}: schema already at version {}", config.store.display(), report.to)
    } else {
        format!("{}: migrated schema from version {} to {}", config.store.display(), report.from, report.to)
    };
    Ok(Output::new(serde_json::json!({"store": config.store, "from": report.from, "to": report.to, "applied": report.applied()}), text))
}

fn ingest(runner: &Runner, a: IngestArgs) -> Result<Output> {
    let taxonomy = Arc::new(load_taxonomy(&a.taxonomy).with_context(|| format!("taxonomy {}", a.taxonomy.display()))?);
    let (source, Ingested { corpus, dropped_empty }) = match (&a.csv, &a.jsonl) {
        (Some(path), _) => {
            let mapping = CsvMapping { id_col: a.id_col, text_col: a.text_col, label_col: a.label_col, label_delim: a.label_delim };
            (path.clone(), ingest_csv(path, &mapping, Arc::clone(&taxonomy))?)
        }
        (None, Some(path)) => (path.clone(), ingest_jsonl(path, Arc::clone(&taxonomy))?),
        (None, None) => bail!("pass --csv or --jsonl"),
    };
    let name = a
        .project
        .unwrap_or_else(|| source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into()));
    let snapshot = serde_json::json!({
        "source": source,
        "taxonomy_file": a.taxonomy,
        "documents": corpus.len(),
        "dropped_empty": dropped_empty.len(),
    });
    let project = runner.store.create_project(&name, &taxonomy, Some(&source.display().to_string()), &snapshot)?;
    runner.store.insert_documents(&project.id, corpus.documents())?;
    let text = format!(
        "project {} ({}): {} documents ingested, {} empty rows skipped; taxonomy {} with {} labels",
        project.name,
        project.id,
        corpus.len(),
        dropped_empty.len(),
        taxonomy.name(),
        taxonomy.len()
    );
    Ok(Output::new(
        serde_json::json!({
            "project": project,
            "documents": corpus.len(),
            "dropped_empty_rows": dropped_empty,
        }),
        text,
    ))
}

async fn classify(runner: &Runner, a: ClassifyArgs) -> Result<Output> {
    let job_id = match a.resume {
        Some(id) => id,
        None => {
            let mut strategies = Vec::new();
            for b in &a.backends {
                for k in &a.strategies {
                    strategies.push(StrategyConfig::new(*k, b.clone()));
                }
            }
            let params = CrowdParams { strategies, workers: a.workers, outage_threshold: None };
            runner.create_crowd(&a.project, &params)?.id
        }
    };
    let report = runner.execute_crowd(&job_id).await?;
    if let Some(out) = &a.out {
        jsonl::write_all(out, &report.outcome.results).with_context(|| format!("writing {}", out.display()))?;
    }
    let mut text = format!(
        "job {}: {} documents, {} pairs run, {} reused, {} candidates, {} strategy failures",
        report.job_id, report.documents, report.executed, report.reused, report.candidates, report.failures
    );
    if let Some(h) = &report.halted {
        text.push_str(&format!("\nhalted: {h}; {} documents pending. Resume with --resume {}", report.pending, report.job_id));
    }
    if report.halted.is_some() {
        bail!("{text}");
    }
    Ok(Output::new(&report, text))
}

fn parse_coder(spec: &str) -> Result<Coder> {
    let (id, role) = match spec.split_once(':') {
        Some((id, role)) => {
            let role: CoderRole = serde_json::from_value(serde_json::Value::String(role.to_string()))
                .map_err(|_| anyhow!("unknown role `{role}` (expected expert, trained or crowd)"))?;
            (id, role)
        }
        None => (spec, CoderRole::Trained),
    };
    if id.is_empty() {
        bail!("empty coder id in `{spec}`");
    }
    Ok(Coder::new(id, role))
}

#[derive(Serialize)]
struct IssuedToken {
    coder_id: String,
    role: CoderRole,
    token: String,
    assigned: usize,
}

fn assign_cmd(runner: &Runner, a: AssignArgs) -> Result<Output> {
    let project = runner.store.project(&a.project)?;
    if project.stage < Stage::CrowdDone {
        bail!("project {} has no candidates yet; run classify first", project.name);
    }
    let coders = a.coders.iter().map(|c| parse_coder(c)).collect::<Result<Vec<_>>>()?;
    let candidates = runner.store.candidates(&project.id)?;
    let corpus = runner.store.corpus(&project)?;
    let doc_ids: Vec<String> = corpus.documents().iter().filter(|d| candidates.contains_key(&d.id)).map(|d| d.id.clone()).collect();
    let d = &runner.config.defaults;
    let opts = AssignOptions {
        overlap_fraction: a.overlap.unwrap_or(d.overlap_fraction),
        overlap_coders: a.overlap_coders.unwrap_or(d.overlap_coders),
        per_coder_cap: a.cap.unwrap_or(usize::MAX),
        seed: a.seed.unwrap_or(d.seed),
    };
    let assignments = assign(&doc_ids, &coders, &opts)?;
    let issued: Vec<(Coder, String)> = coders.into_iter().map(|c| (c, store::new_token())).collect();
    let snapshot = serde_json::json!({
        "overlap_fraction": opts.overlap_fraction,
        "overlap_coders": opts.overlap_coders,
        "per_coder_cap": a.cap,
        "seed": opts.seed,
        "coders": issued.iter().map(|(c, _)| &c.id).collect::<Vec<_>>(),
    });
    runner.store.add_assignments(&project.id, &issued, &assignments, &snapshot)?;
    let overlap_docs = {
        let mut set: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for x in assignments.iter().filter(|x| x.overlap) {
            set.insert(&x.doc_id);
        }
        set.len()
    };
    let tokens: Vec<IssuedToken> = issued
        .into_iter()
        .map(|(c, token)| IssuedToken {
            assigned: assignments.iter().filter(|x| x.coder_id == c.id).count(),
            coder_id: c.id,
            role: c.role,
            token,
        })
        .collect();
    let mut text = format!(
        "{} documents assigned ({} in the overlap set), {} assignments. Tokens are shown once:\n",
        doc_ids.len(),
        overlap_docs,
        assignments.len()
    );
    for t in &tokens {
        text.push_str(&format!("  {:<16} {:>5} docs  {}\n", t.coder_id, t.assigned, t.token));
    }
    Ok(Output::new(
        serde_json::json!({"documents": doc_ids.len(), "overlap_documents": overlap_docs, "assignments": assignments.len(), "coders": tokens}),
        text,
    ))
}

async fn serve(runner: Runner, a: ServeArgs) -> Result<Output> {
    let operator_token = runner.config.operator_token()?;
    if operator_token.is_none() {
        tracing::warn!("no operator token configured; operator endpoints are open");
    }
    let bind = a.bind.unwrap_or_else(|| runner.config.bind.clone());
    let static_dir = a.static_dir.or_else(|| runner.config.static_dir.clone());
    if let Some(dir) = &static_dir {
        if !dir.is_dir() {
            bail!("static directory {} does not exist", dir.display());
        }
    }
    eprintln!("labelforge listening on http://{bind}");
    api::serve(AppState { runner, operator_token }, static_dir, &bind).await?;
    Ok(Output::new(serde_json::json!({}), ""))
}

/// One line of resolved.jsonl.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResolvedLine {
    pub doc_id: String,
    pub text: String,
    pub surviving_labels: Vec<LabelId>,
    pub policy: ResolutionPolicy,
    pub conflict: bool,
}

fn resolve_cmd(runner: &Runner, a: ResolveArgs) -> Result<Output> {
    let project = runner.store.project(&a.project)?;
    let policy = a.policy.unwrap_or(runner.config.defaults.policy);
    let outcome = runner.store.resolve_project(&project.id, policy, &serde_json::json!({ "policy": policy }))?;
    if let Some(out) = &a.out {
        let corpus = runner.store.corpus(&project)?;
        let lines: Vec<ResolvedLine> = runner
            .store
            .resolutions(&project.id)?
            .into_iter()
            .map(|r| ResolvedLine {
                text: corpus.get(&r.doc_id).map(|d| d.text.clone()).unwrap_or_default(),
                doc_id: r.doc_id,
                surviving_labels: r.surviving_labels,
                policy: r.policy,
                conflict: r.conflict,
            })
            .collect();
        jsonl::write_all(out, &lines).with_context(|| format!("writing {}", out.display()))?;
    }
    let text = format!(
        "{} documents resolved with {policy}, {} conflicts, {} not ready",
        outcome.resolved.len(),
        outcome.conflicts.len(),
        outcome.not_ready.len()
    );
    Ok(Output::new(
        serde_json::json!({
            "policy": policy,
            "resolved": outcome.resolved.len(),
            "conflicts": outcome.conflicts,
            "not_ready": outcome.not_ready,
        }),
        text,
    ))
}

fn export(runner: &Runner, a: ExportArgs) -> Result<Output> {
    let project = runner.store.project(&a.project)?;
    if project.stage < Stage::Resolved {
        bail!("project {} is at stage {}; resolve every document first", project.name, project.stage.as_str());
    }
    let template = runner
        .templates()
        .get(&a.template)
        .ok_or_else(|| anyhow!("unknown template `{}`", a.template))?
        .clone();
    let corpus = runner.store.corpus(&project)?;
    let resolved = runner.store.resolutions(&project.id)?;
    let d = &runner.config.defaults;
    let opts = ExportOptions {
        ratio: a.ratio.unwrap_or(d.ratio),
        seed: a.seed.unwrap_or(d.seed),
        per_label_replication: a.per_label_replication,
        include_empty: a.include_empty,
    };
    let exported = export_finetune(&resolved, &corpus, &template, &opts)?;
    exported.write(&a.out)?;
    let manifest = &exported.manifest;
    runner.store.advance_stage(&project.id, Stage::Exported, &serde_json::to_value(manifest)?)?;
    let c = &manifest.counts;
    let text = format!(
        "wrote {}: {} train examples ({} documents), {} test examples ({} documents), {} empty documents skipped",
        a.out.display(),
        c.train_examples,
        c.train_documents,
        c.test_examples,
        c.test_documents,
        c.skipped_empty
    );
    Ok(Output::new(manifest, text))
}

async fn scale(runner: &Runner, a: ScaleArgs) -> Result<Output> {
    let job_id = match &a.resume {
        Some(id) => {
            let job = runner.store.job(id)?;
            if job.kind != JobKind::Scale {
                bail!("job {id} is not a scale job");
            }
            id.clone()
        }
        None => {
            let params = ScaleParams {
                corpus: a.corpus.clone().ok_or_else(|| anyhow!("--corpus is required"))?,
                taxonomy: a.taxonomy.clone(),
                backend: a.backend.clone().ok_or_else(|| anyhow!("--backend is required"))?,
                strategy: a.strategy,
                template: a.template.clone(),
                batch_size: a.batch_size,
                concurrency: a.concurrency,
                doc_attempts: None,
                outage_threshold: None,
            };
            runner.create_scale(a.project.as_deref(), a.job.as_deref(), &params)?.id
        }
    };
    let halter = runner.clone();
    let id = job_id.clone();
    let watcher = tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupt: finishing in-flight documents, then checkpointing");
            halter.halt(&id);
        }
    });
    let result = runner.execute_scale(&job_id).await;
    watcher.abort();
    let s = result?;
    let mut text = format!(
        "job {}: {}/{} recorded ({} failed, {} retried), {} this run at {:.1} docs/s; {} completions, tokens {} in / {} out, cost {:.4}",
        s.job_id,
        s.counters.done + s.counters.failed,
        s.total,
        s.counters.failed,
        s.counters.retried,
        s.processed,
        s.throughput,
        s.completions,
        s.input_tokens,
        s.output_tokens,
        s.cost
    );
    text.push_str(&format!("\npredictions: {}", runner.job_dir(&s.job_id).join(PREDICTIONS_FILE).display()));
    if let Some(h) = &s.halted {
        bail!("{text}\nhalted: {h}; {} pending. Resume with --resume {}", s.pending, s.job_id);
    }
    Ok(Output::new(&s, text))
}

fn reliability_cmd(runner: &Runner, a: ProjectArg) -> Result<Output> {
    let view = api::reliability_view(&runner.store, &a.project)?;
    let r = &view.report;
    let fmt_k = |k: &labelforge_core::verification::Kappa| match k.percent {
        Some(p) => format!("{p:.1}%"),
        None => format!("not computable ({})", k.undefined_reason.as_deref().unwrap_or("undefined")),
    };
    let mut text = format!("overlap documents: {}\n", r.overlap_documents);
    if !view.computable {
        text.push_str("kappa: not computable\n");
    }
    if let Some(f) = &r.fleiss {
        text.push_str(&format!("Fleiss kappa: {}\n", fmt_k(f)));
    }
    if let Some(e) = &r.fleiss_error {
        text.push_str(&format!("Fleiss kappa: {e}\n"));
    }
    for p in &r.pairwise {
        text.push_str(&format!("Cohen kappa {} / {}: {}\n", p.coder_a, p.coder_b, fmt_k(&p.kappa)));
    }
    if let Some(m) = r.per_label_macro {
        text.push_str(&format!("per-label kappa (mean of {} defined): {:.1}%\n", r.per_label.len() - r.per_label_undefined, m * 100.0));
    }
    Ok(Output::new(&view, text))
}

// ---- metrics and evaluate ----

#[derive(Deserialize)]
struct TruthRow {
    id: serde_json::Value,
    #[serde(alias = "labels", alias = "truth")]
    true_labels: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct PredRow {
    id: serde_json::Value,
    #[serde(alias = "pred", alias = "predicted")]
    labels: Vec<String>,
}

fn id_string(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => bail!("document id must be a string or number, got {other}"),
    }
}

fn resolve_labels(taxonomy: &Taxonomy, tokens: &[String], what: &str, id: &str) -> Result<Vec<LabelId>> {
    tokens
        .iter()
        .filter(|t| !t.trim().is_empty())
        .map(|t| taxonomy.resolve_token(t).ok_or_else(|| anyhow!("{what} for `{id}`: unknown label `{t}`")))
        .collect()
}

fn default_mode(taxonomy: &Taxonomy, mode: Option<Mode>) -> Mode {
    mode.unwrap_or(if taxonomy.is_exclusive() { Mode::Exclusive } else { Mode::Multilabel })
}

fn write_report(report: &MetricsReport, extra: Option<serde_json::Value>, taxonomy: &Taxonomy, set_name: &str, path: Option<&Path>) -> Result<String> {
    let markdown = render_markdown(report, Some(taxonomy), set_name);
    if let Some(path) = path {
        let body = match path.extension().and_then(|e| e.to_str()) {
            Some("md") => markdown.clone(),
            Some("json") => {
                let mut v = serde_json::to_value(report)?;
                if let Some(extra) = extra {
                    v["run"] = extra;
                }
                serde_json::to_string_pretty(&v)? + "\n"
            }
            _ => bail!("--report must end in .json or .md"),
        };
        std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(markdown)
}

fn metrics(a: MetricsArgs) -> Result<Output> {
    let taxonomy = load_taxonomy(&a.taxonomy).with_context(|| format!("taxonomy {}", a.taxonomy.display()))?;
    let truth: Vec<TruthRow> = jsonl::read_all(&a.truth).with_context(|| format!("reading {}", a.truth.display()))?;
    let preds: Vec<PredRow> = jsonl::read_all(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let mut pred_map: HashMap<String, Vec<LabelId>> = HashMap::new();
    for p in &preds {
        let id = id_string(&p.id)?;
        let labels = resolve_labels(&taxonomy, &p.labels, "prediction", &id)?;
        if pred_map.insert(id.clone(), labels).is_some() {
            bail!("duplicate prediction for `{id}`");
        }
    }
    let mut rows = Vec::with_capacity(truth.len());
    let mut seen = std::collections::HashSet::new();
    for t in &truth {
        let id = id_string(&t.id)?;
        let labels = t.true_labels.as_deref().ok_or_else(|| anyhow!("truth row `{id}` has no labels"))?;
        let labels = resolve_labels(&taxonomy, labels, "truth", &id)?;
        seen.insert(id.clone());
        let pred = pred_map.get(&id).cloned().unwrap_or_default();
        rows.push((id, labels, pred));
    }
    let missing = rows.iter().filter(|(id, _, _)| !pred_map.contains_key(id)).count();
    let unmatched = pred_map.keys().filter(|k| !seen.contains(*k)).count();
    let set = PredictionSet::from_label_sets(&taxonomy, rows)?;
    let mode = default_mode(&taxonomy, a.mode);
    let report = evaluate(&set, mode)?;
    let alignment = serde_json::json!({"missing_predictions": missing, "unmatched_predictions": unmatched});
    let mut text = write_report(&report, Some(alignment.clone()), &taxonomy, &a.set_name, a.report.as_deref())?;
    if missing > 0 || unmatched > 0 {
        text.push_str(&format!(
            "\n{missing} documents had no prediction (scored as unclassified); {unmatched} predictions matched no document\n"
        ));
    }
    let mut json = serde_json::to_value(&report)?;
    json["run"] = alignment;
    Ok(Output { json, text })
}

fn evaluate_cmd(a: EvaluateArgs, store: Option<&Store>, config: &AppConfig) -> Result<Output> {
    let run_path = PathBuf::from(&a.run);
    let (predictions_path, job) = if run_path.is_file() {
        (run_path, None)
    } else if run_path.is_dir() {
        (run_path.join(PREDICTIONS_FILE), None)
    } else {
        let store = store.ok_or_else(|| anyhow!("run `{}` is neither a file nor a directory", a.run))?;
        let job = store.job(&a.run)?;
        if job.status == JobStatus::Running {
            bail!("job {} is still running", job.id);
        }
        (config.work_dir.join("jobs").join(&job.id).join(PREDICTIONS_FILE), Some(job))
    };
    let taxonomy = match (&a.taxonomy, &job) {
        (Some(p), _) => load_taxonomy(p)?,
        (None, Some(job)) => {
            let params: ScaleParams = serde_json::from_value(job.params.clone())?;
            match (params.taxonomy, &job.project_id, store) {
                (Some(p), _, _) => load_taxonomy(p)?,
                (None, Some(pid), Some(store)) => {
                    let project = store.project(pid)?;
                    store.taxonomy(&project.taxonomy_sha)?
                }
                _ => bail!("cannot tell which taxonomy job {} used; pass --taxonomy", job.id),
            }
        }
        (None, None) => bail!("pass --taxonomy"),
    };
    let taxonomy = Arc::new(taxonomy);
    let gold = ingest_jsonl(&a.gold, Arc::clone(&taxonomy)).with_context(|| format!("reading {}", a.gold.display()))?.corpus;
    let records: Vec<PredictionRecord> =
        jsonl::read_all(&predictions_path).with_context(|| format!("reading {}", predictions_path.display()))?;
    let preds: Vec<PredictedLabels> = records.into_iter().map(PredictedLabels::from).collect();
    let mode = default_mode(&taxonomy, a.mode);
    let run = evaluate_run(&preds, &gold, mode, Some(a.run.clone()))?;
    let meta = serde_json::to_value(&run.metadata)?;
    let mut text = write_report(&run.report, Some(meta), &taxonomy, &a.set_name, a.report.as_deref())?;
    let m = &run.metadata;
    text.push_str(&format!(
        "\n{} predictions against {} gold documents; {} missing, {} failed\n",
        m.predictions, m.gold_documents, m.missing, m.failed
    ));
    Ok(Output::new(&run, text))
}
