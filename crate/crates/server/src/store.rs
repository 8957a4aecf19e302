//! SQLite persistence for projects and the review workflow.
//!
//! One connection behind a mutex: every write runs in its own immediate
//! transaction, so an interrupted request never leaves partial state behind.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use labelforge_core::corpus::{Corpus, Document};
use labelforge_core::gateway::CompletionRecord;
use labelforge_core::strategies::{CandidateLabel, CrowdResult, Provenance};
use labelforge_core::taxonomy::{LabelId, Taxonomy, TaxonomyFile};
use labelforge_core::verification::{
    resolve, validate_decisions, Assignment, AssignmentStatus, Coder, CoderRole, Decision, ResolutionPolicy,
    ResolvedDocument, VerificationError, VerificationRecord,
};
use rusqlite::{params, Connection, OptionalExtension, Transaction, TransactionBehavior};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Schema migrations, applied in order. The store's version is the number
/// of entries applied.
const MIGRATIONS: &[&str] = &[
    // 1: base tables
    r#"
    CREATE TABLE taxonomies (
        sha TEXT PRIMARY KEY,
        name TEXT NOT NULL,
        body TEXT NOT NULL
    );
    CREATE TABLE projects (
        id TEXT PRIMARY KEY,
        name TEXT NOT NULL UNIQUE,
        taxonomy_sha TEXT NOT NULL REFERENCES taxonomies(sha),
        corpus_ref TEXT,
        stage TEXT NOT NULL,
        config TEXT NOT NULL,
        created_at TEXT NOT NULL,
        updated_at TEXT NOT NULL
    );
    CREATE TABLE project_revisions (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        project_id TEXT NOT NULL REFERENCES projects(id),
        stage TEXT NOT NULL,
        config TEXT NOT NULL,
        created_at TEXT NOT NULL
    );
    CREATE TABLE documents (
        project_id TEXT NOT NULL REFERENCES projects(id),
        id TEXT NOT NULL,
        seq INTEGER NOT NULL,
        text TEXT NOT NULL,
        true_labels TEXT,
        source TEXT NOT NULL,
        PRIMARY KEY (project_id, id)
    );
    CREATE TABLE candidates (
        project_id TEXT NOT NULL,
        doc_id TEXT NOT NULL,
        label TEXT NOT NULL,
        provenance TEXT NOT NULL,
        first_seen TEXT NOT NULL,
        PRIMARY KEY (project_id, doc_id, label),
        FOREIGN KEY (project_id, doc_id) REFERENCES documents(project_id, id)
    );
    CREATE TABLE coders (
        project_id TEXT NOT NULL REFERENCES projects(id),
        id TEXT NOT NULL,
        display_name TEXT NOT NULL,
        role TEXT NOT NULL,
        token_hash TEXT NOT NULL UNIQUE,
        created_at TEXT NOT NULL,
        PRIMARY KEY (project_id, id)
    );
    CREATE TABLE assignments (
        project_id TEXT NOT NULL,
        coder_id TEXT NOT NULL,
        doc_id TEXT NOT NULL,
        status TEXT NOT NULL,
        overlap INTEGER NOT NULL,
        assigned_at TEXT NOT NULL,
        PRIMARY KEY (project_id, coder_id, doc_id),
        FOREIGN KEY (project_id, coder_id) REFERENCES coders(project_id, id),
        FOREIGN KEY (project_id, doc_id) REFERENCES documents(project_id, id)
    );
    CREATE TABLE reviews (
        id TEXT PRIMARY KEY,
        project_id TEXT NOT NULL,
        coder_id TEXT NOT NULL,
        doc_id TEXT NOT NULL,
        decisions TEXT NOT NULL,
        none_apply INTEGER NOT NULL,
        submitted_at TEXT NOT NULL,
        supersedes TEXT REFERENCES reviews(id),
        idempotency_key TEXT,
        UNIQUE (project_id, coder_id, idempotency_key),
        FOREIGN KEY (project_id, coder_id, doc_id) REFERENCES assignments(project_id, coder_id, doc_id)
    );
    CREATE TABLE resolutions (
        project_id TEXT NOT NULL,
        doc_id TEXT NOT NULL,
        surviving TEXT NOT NULL,
        policy TEXT NOT NULL,
        conflict INTEGER NOT NULL,
        none_apply INTEGER NOT NULL,
        records TEXT NOT NULL,
        resolved_at TEXT NOT NULL,
        PRIMARY KEY (project_id, doc_id),
        FOREIGN KEY (project_id, doc_id) REFERENCES documents(project_id, id)
    );
    CREATE TABLE jobs (
        id TEXT PRIMARY KEY,
        project_id TEXT REFERENCES projects(id),
        kind TEXT NOT NULL,
        status TEXT NOT NULL,
        params TEXT NOT NULL,
        progress TEXT,
        error TEXT,
        created_at TEXT NOT NULL,
        updated_at TEXT NOT NULL
    );
    CREATE TABLE completions (
        id TEXT PRIMARY KEY,
        project_id TEXT REFERENCES projects(id),
        job_id TEXT REFERENCES jobs(id),
        backend TEXT NOT NULL,
        model TEXT NOT NULL,
        prompt_hash TEXT NOT NULL,
        raw_text TEXT NOT NULL,
        input_tokens INTEGER NOT NULL,
        output_tokens INTEGER NOT NULL,
        latency_ms INTEGER NOT NULL,
        cost REAL,
        attempts INTEGER NOT NULL,
        context TEXT,
        timestamp TEXT NOT NULL
    );
    "#,
    // 2: review immutability and lookup indexes
    r#"
    CREATE TRIGGER reviews_no_update BEFORE UPDATE ON reviews
    BEGIN SELECT RAISE(ABORT, 'reviews are append-only'); END;
    CREATE TRIGGER reviews_no_delete BEFORE DELETE ON reviews
    BEGIN SELECT RAISE(ABORT, 'reviews are append-only'); END;
    CREATE INDEX assignments_by_doc ON assignments(project_id, doc_id);
    CREATE INDEX reviews_by_doc ON reviews(project_id, doc_id);
    CREATE INDEX completions_by_job ON completions(job_id);
    "#,
];

pub const SCHEMA_VERSION: i64 = MIGRATIONS.len() as i64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("store is at schema version {found}, this build supports up to {supported}; refusing to downgrade")]
    FutureVersion { found: i64, supported: i64 },
    #[error("store integrity check failed: {0}")]
    Corrupt(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Invalid(String),
    #[error("stored JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<VerificationError> for StoreError {
    fn from(e: VerificationError) -> Self {
        match e {
            VerificationError::AlreadySubmitted { .. } => StoreError::Conflict(e.to_string()),
            VerificationError::NotAssigned { .. } => StoreError::Forbidden(e.to_string()),
            VerificationError::UnknownDocument(_) => StoreError::NotFound(e.to_string()),
            other => StoreError::Invalid(other.to_string()),
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Workflow stages in order; a project only moves forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingested,
    CrowdDone,
    Verifying,
    Resolved,
    Exported,
    Scaling,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingested => "ingested",
            Stage::CrowdDone => "crowd_done",
            Stage::Verifying => "verifying",
            Stage::Resolved => "resolved",
            Stage::Exported => "exported",
            Stage::Scaling => "scaling",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ingested" => Stage::Ingested,
            "crowd_done" => Stage::CrowdDone,
            "verifying" => Stage::Verifying,
            "resolved" => Stage::Resolved,
            "exported" => Stage::Exported,
            "scaling" => Stage::Scaling,
            other => return Err(StoreError::Corrupt(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub name: String,
    pub taxonomy: String,
    pub taxonomy_sha: String,
    pub corpus_ref: Option<String>,
    pub stage: Stage,
    /// Snapshot taken at the latest stage transition.
    pub config: serde_json::Value,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub id: i64,
    pub stage: Stage,
    pub config: serde_json::Value,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MigrationReport {
    pub from: i64,
    pub to: i64,
}

impl MigrationReport {
    pub fn applied(&self) -> i64 {
        self.to - self.from
    }
}

/// The coder a capability token belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoderIdentity {
    pub project_id: String,
    pub coder_id: String,
    pub display_name: String,
    pub role: CoderRole,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentView {
    pub doc_id: String,
    pub status: AssignmentStatus,
    pub overlap: bool,
    pub assigned_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateView {
    pub label: LabelId,
    pub name: String,
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Number of strategies that proposed the label.
    pub provenance_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<Provenance>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocView {
    pub id: String,
    pub text: String,
    pub status: AssignmentStatus,
    pub candidates: Vec<CandidateView>,
    /// The coder's current record, when already submitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub review: Option<VerificationRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct ReviewInput {
    pub doc_id: String,
    #[serde(default)]
    pub decisions: BTreeMap<LabelId, Decision>,
    #[serde(default)]
    pub none_apply: bool,
    #[serde(default)]
    pub supersede: bool,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmitOutcome {
    pub record: VerificationRecord,
    /// The idempotency key matched an earlier submission; nothing was written.
    pub replayed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoderProgress {
    pub coder_id: String,
    pub display_name: String,
    pub role: CoderRole,
    pub assigned: usize,
    pub submitted: usize,
    pub completion_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelProgress {
    pub label: LabelId,
    pub name: String,
    /// Current records in which the label was shown.
    pub shown: usize,
    pub rejected: usize,
    pub rejection_rate: Option<f64>,
    /// Documents with every assignment submitted where the label was a candidate.
    pub decided_documents: usize,
    pub survived: usize,
    pub survival_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Progress {
    pub project_id: String,
    pub stage: Stage,
    pub policy: ResolutionPolicy,
    pub documents: usize,
    pub assignments: usize,
    pub submitted: usize,
    pub completion_pct: Option<f64>,
    pub coders: Vec<CoderProgress>,
    pub labels: Vec<LabelProgress>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolveOutcome {
    pub resolved: Vec<ResolvedDocument>,
    /// Documents with candidates that still have pending or no assignments.
    pub not_ready: Vec<String>,
    pub conflicts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Crowd,
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Halted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRow {
    pub id: String,
    pub project_id: Option<String>,
    pub kind: JobKind,
    pub status: JobStatus,
    pub params: serde_json::Value,
    pub progress: Option<serde_json::Value>,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

pub fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

/// A fresh random capability token (two v4 UUIDs, 244 random bits).
pub fn new_token() -> String {
    format!("{}{}", uuid::Uuid::new_v4().simple(), uuid::Uuid::new_v4().simple())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

fn from_json<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    Ok(serde_json::from_str(s)?)
}

fn time(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::Corrupt(format!("bad timestamp `{s}`: {e}")))
}

fn enum_str<T: Serialize>(v: T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn enum_parse<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    Ok(serde_json::from_value(serde_json::Value::String(s.to_string()))?)
}

fn schema_version(conn: &Connection) -> Result<i64> {
    conn.execute_batch("CREATE TABLE IF NOT EXISTS schema_version (version INTEGER NOT NULL);")?;
    let v: Option<i64> = conn.query_row("SELECT MAX(version) FROM schema_version", [], |r| r.get(0))?;
    Ok(v.unwrap_or(0))
}

/// Brings the schema to [`SCHEMA_VERSION`]. Already-current stores are left
/// untouched; stores written by a newer build are refused.
pub fn migrate(conn: &mut Connection) -> Result<MigrationReport> {
    let tx = conn.transaction_with_behavior(TransactionBehavior::Exclusive)?;
    let from = schema_version(&tx)?;
    if from > SCHEMA_VERSION {
        return Err(StoreError::FutureVersion { found: from, supported: SCHEMA_VERSION });
    }
    for (i, sql) in MIGRATIONS.iter().enumerate().skip(from as usize) {
        tx.execute_batch(sql)?;
        tx.execute("INSERT INTO schema_version (version) VALUES (?1)", [i as i64 + 1])?;
    }
    tx.commit()?;
    Ok(MigrationReport { from, to: SCHEMA_VERSION })
}

pub struct Store {
    conn: Mutex<Connection>,
    path: PathBuf,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

impl Store {
    /// Opens (creating if absent), checks integrity and migrates.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, MigrationReport)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| StoreError::Invalid(format!("{}: {e}", dir.display())))?;
        }
        let mut conn = Connection::open(&path)?;
        conn.busy_timeout(std::time::Duration::from_secs(10))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        let check: String = conn.query_row("PRAGMA quick_check", [], |r| r.get(0))?;
        if check != "ok" {
            return Err(StoreError::Corrupt(check));
        }
        let report = migrate(&mut conn)?;
        Ok((Store { conn: Mutex::new(conn), path }, report))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    pub fn version(&self) -> Result<i64> {
        schema_version(&self.conn())
    }

    // ---- projects ----

    pub fn create_project(
        &self,
        name: &str,
        taxonomy: &Taxonomy,
        corpus_ref: Option<&str>,
        config: &serde_json::Value,
    ) -> Result<Project> {
        if name.trim().is_empty() {
            return Err(StoreError::Invalid("project name is empty".into()));
        }
        let now = Utc::now();
        let project = Project {
            id: uuid::Uuid::new_v4().to_string(),
            name: name.to_string(),
            taxonomy: taxonomy.name().to_string(),
            taxonomy_sha: taxonomy.sha(),
            corpus_ref: corpus_ref.map(str::to_string),
            stage: Stage::Ingested,
            config: config.clone(),
            created_at: now,
            updated_at: now,
        };
        self.write(|tx| {
            let taken: bool = tx.query_row("SELECT EXISTS(SELECT 1 FROM projects WHERE name = ?1)", [name], |r| r.get(0))?;
            if taken {
                return Err(StoreError::Conflict(format!("project `{name}` already exists")));
            }
            tx.execute(
                "INSERT OR IGNORE INTO taxonomies (sha, name, body) VALUES (?1, ?2, ?3)",
                params![project.taxonomy_sha, taxonomy.name(), to_json(&taxonomy.to_file())?],
            )?;
            tx.execute(
                "INSERT INTO projects (id, name, taxonomy_sha, corpus_ref, stage, config, created_at, updated_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?7)",
                params![
                    project.id,
                    project.name,
                    project.taxonomy_sha,
                    project.corpus_ref,
                    project.stage.as_str(),
                    to_json(config)?,
                    now.to_rfc3339()
                ],
            )?;
            tx.execute(
                "INSERT INTO project_revisions (project_id, stage, config, created_at) VALUES (?1, ?2, ?3, ?4)",
                params![project.id, project.stage.as_str(), to_json(config)?, now.to_rfc3339()],
            )?;
            Ok(())
        })?;
        Ok(project)
    }

    fn project_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<(Vec<String>, Option<String>)> {
        Ok((
            vec![r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(5)?, r.get(6)?, r.get(7)?, r.get(8)?],
            r.get(4)?,
        ))
    }

    fn build_project((f, corpus_ref): (Vec<String>, Option<String>)) -> Result<Project> {
        Ok(Project {
            id: f[0].clone(),
            name: f[1].clone(),
            taxonomy: f[2].clone(),
            taxonomy_sha: f[3].clone(),
            corpus_ref,
            stage: Stage::parse(&f[4])?,
            config: from_json(&f[5])?,
            created_at: time(&f[6])?,
            updated_at: time(&f[7])?,
        })
    }

    const PROJECT_COLUMNS: &'static str = "p.id, p.name, t.name, p.taxonomy_sha, p.corpus_ref, p.stage, p.config, p.created_at, p.updated_at
         FROM projects p JOIN taxonomies t ON t.sha = p.taxonomy_sha";

    pub fn list_projects(&self) -> Result<Vec<Project>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!("SELECT {} ORDER BY p.created_at, p.id", Self::PROJECT_COLUMNS))?;
        let rows = stmt.query_map([], Self::project_from_row)?.collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter().map(Self::build_project).collect()
    }

    /// Looks a project up by id or by name.
    pub fn project(&self, key: &str) -> Result<Project> {
        let conn = self.conn();
        let row = conn
            .query_row(
                &format!("SELECT {} WHERE p.id = ?1 OR p.name = ?1", Self::PROJECT_COLUMNS),
                [key],
                Self::project_from_row,
            )
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("project `{key}`")))?;
        Self::build_project(row)
    }

    pub fn rename_project(&self, id: &str, name: &str) -> Result<Project> {
        if name.trim().is_empty() {
            return Err(StoreError::Invalid("project name is empty".into()));
        }
        self.write(|tx| {
            let taken: bool = tx.query_row(
                "SELECT EXISTS(SELECT 1 FROM projects WHERE name = ?1 AND id <> ?2)",
                params![name, id],
                |r| r.get(0),
            )?;
            if taken {
                return Err(StoreError::Conflict(format!("project `{name}` already exists")));
            }
            let n = tx.execute(
                "UPDATE projects SET name = ?1, updated_at = ?2 WHERE id = ?3",
                params![name, Utc::now().to_rfc3339(), id],
            )?;
            if n == 0 {
                return Err(StoreError::NotFound(format!("project `{id}`")));
            }
            Ok(())
        })?;
        self.project(id)
    }

    /// Deletes a project that has no reviews; reviews are never deleted.
    pub fn delete_project(&self, id: &str) -> Result<()> {
        self.write(|tx| {
            let exists: bool = tx.query_row("SELECT EXISTS(SELECT 1 FROM projects WHERE id = ?1)", [id], |r| r.get(0))?;
            if !exists {
                return Err(StoreError::NotFound(format!("project `{id}`")));
            }
            let reviews: i64 = tx.query_row("SELECT COUNT(*) FROM reviews WHERE project_id = ?1", [id], |r| r.get(0))?;
            if reviews > 0 {
                return Err(StoreError::Conflict(format!(
                    "project has {reviews} reviews; reviews are append-only so the project cannot be deleted"
                )));
            }
            for table in [
                "completions",
                "jobs",
                "resolutions",
                "assignments",
                "coders",
                "candidates",
                "documents",
                "project_revisions",
                "projects",
            ] {
                let col = if table == "projects" { "id" } else { "project_id" };
                tx.execute(&format!("DELETE FROM {table} WHERE {col} = ?1"), [id])?;
            }
            Ok(())
        })
    }

    /// Moves the project to `to` and records a revision with `config`.
    /// Repeating the current stage adds a revision; going back is refused.
    pub fn advance_stage(&self, id: &str, to: Stage, config: &serde_json::Value) -> Result<Project> {
        self.write(|tx| advance_in(tx, id, to, config))?;
        self.project(id)
    }

    pub fn revisions(&self, id: &str) -> Result<Vec<Revision>> {
        let conn = self.conn();
        let mut stmt =
            conn.prepare("SELECT id, stage, config, created_at FROM project_revisions WHERE project_id = ?1 ORDER BY id")?;
        let rows = stmt
            .query_map([id], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get::<_, String>(3)?)))?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter()
            .map(|(id, s, c, t)| Ok(Revision { id, stage: Stage::parse(&s)?, config: from_json(&c)?, created_at: time(&t)? }))
            .collect()
    }

    pub fn taxonomy(&self, sha: &str) -> Result<Taxonomy> {
        let body: String = self
            .conn()
            .query_row("SELECT body FROM taxonomies WHERE sha = ?1", [sha], |r| r.get(0))
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("taxonomy {sha}")))?;
        let file: TaxonomyFile = from_json(&body)?;
        Taxonomy::from_file(file).map_err(|e| StoreError::Corrupt(e.to_string()))
    }

    pub fn project_taxonomy(&self, project: &Project) -> Result<Arc<Taxonomy>> {
        Ok(Arc::new(self.taxonomy(&project.taxonomy_sha)?))
    }

    // ---- documents and candidates ----

    pub fn insert_documents(&self, project_id: &str, docs: &[Document]) -> Result<usize> {
        self.write(|tx| {
            let existing: i64 =
                tx.query_row("SELECT COUNT(*) FROM documents WHERE project_id = ?1", [project_id], |r| r.get(0))?;
            let mut stmt = tx.prepare(
                "INSERT INTO documents (project_id, id, seq, text, true_labels, source) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for (i, d) in docs.iter().enumerate() {
                let labels = d.true_labels.as_ref().map(to_json).transpose()?;
                stmt.execute(params![project_id, d.id, existing + i as i64, d.text, labels, d.source])
                    .map_err(|e| match e {
                        rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
                            StoreError::Conflict(format!("document `{}` already exists in this project", d.id))
                        }
                        other => other.into(),
                    })?;
            }
            Ok(docs.len())
        })
    }

    pub fn document_count(&self, project_id: &str) -> Result<usize> {
        let n: i64 = self.conn().query_row("SELECT COUNT(*) FROM documents WHERE project_id = ?1", [project_id], |r| r.get(0))?;
        Ok(n as usize)
    }

    pub fn corpus(&self, project: &Project) -> Result<Corpus> {
        let taxonomy = self.project_taxonomy(project)?;
        let docs = {
            let conn = self.conn();
            let mut stmt =
                conn.prepare("SELECT id, text, true_labels, source FROM documents WHERE project_id = ?1 ORDER BY seq")?;
            let rows = stmt
                .query_map([&project.id], |r| {
                    Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, Option<String>>(2)?, r.get::<_, String>(3)?))
                })?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            rows.into_iter()
                .map(|(id, text, labels, source)| {
                    Ok(Document { id, text, true_labels: labels.as_deref().map(from_json).transpose()?, source })
                })
                .collect::<Result<Vec<_>>>()?
        };
        Corpus::new(docs, taxonomy).map_err(|e| StoreError::Corrupt(e.to_string()))
    }

    /// Replaces the candidate sets of the documents in `results`. Refused
    /// once review has started, since reviews cover the candidates shown.
    pub fn save_candidates(&self, project_id: &str, results: &[CrowdResult]) -> Result<usize> {
        self.write(|tx| {
            let assigned: i64 =
                tx.query_row("SELECT COUNT(*) FROM assignments WHERE project_id = ?1", [project_id], |r| r.get(0))?;
            if assigned > 0 {
                return Err(StoreError::Conflict("documents are already assigned for review; candidates are frozen".into()));
            }
            let mut n = 0;
            for r in results {
                tx.execute("DELETE FROM candidates WHERE project_id = ?1 AND doc_id = ?2", params![project_id, r.doc_id])?;
                for c in &r.candidates {
                    tx.execute(
                        "INSERT INTO candidates (project_id, doc_id, label, provenance, first_seen) VALUES (?1, ?2, ?3, ?4, ?5)",
                        params![project_id, c.doc_id, c.label.as_str(), to_json(&c.provenance)?, c.first_seen.to_rfc3339()],
                    )?;
                    n += 1;
                }
            }
            Ok(n)
        })
    }

    /// Candidates per document, in taxonomy order.
    pub fn candidates(&self, project_id: &str) -> Result<BTreeMap<String, Vec<CandidateLabel>>> {
        let project = self.project(project_id)?;
        let taxonomy = self.taxonomy(&project.taxonomy_sha)?;
        let conn = self.conn();
        let mut stmt =
            conn.prepare("SELECT doc_id, label, provenance, first_seen FROM candidates WHERE project_id = ?1")?;
        let rows = stmt
            .query_map([&project.id], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get::<_, String>(3)?))
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        let mut out: BTreeMap<String, Vec<CandidateLabel>> = BTreeMap::new();
        for (doc_id, label, prov, seen) in rows {
            out.entry(doc_id.clone()).or_default().push(CandidateLabel {
                doc_id,
                label: LabelId(label),
                provenance: from_json(&prov)?,
                first_seen: time(&seen)?,
            });
        }
        for v in out.values_mut() {
            v.sort_by_key(|c| taxonomy.index_of(&c.label).unwrap_or(usize::MAX));
        }
        Ok(out)
    }

    // ---- coders and assignments ----

    /// Registers coders with their tokens and their assignments atomically,
    /// then moves the project to `verifying`.
    pub fn add_assignments(
        &self,
        project_id: &str,
        coders: &[(Coder, String)],
        assignments: &[Assignment],
        config: &serde_json::Value,
    ) -> Result<()> {
        self.write(|tx| {
            let now = Utc::now().to_rfc3339();
            for (c, token) in coders {
                tx.execute(
                    "INSERT INTO coders (project_id, id, display_name, role, token_hash, created_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                    params![project_id, c.id, c.display_name, enum_str(c.role), hash_token(token), now],
                )
                .map_err(|e| constraint(e, format!("coder `{}` already exists in this project", c.id)))?;
            }
            for a in assignments {
                tx.execute(
                    "INSERT INTO assignments (project_id, coder_id, doc_id, status, overlap, assigned_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                    params![project_id, a.coder_id, a.doc_id, enum_str(a.status), a.overlap, a.assigned_at.to_rfc3339()],
                )
                .map_err(|e| constraint(e, format!("assignment {} -> {} is a duplicate or refers to an unknown coder/document", a.doc_id, a.coder_id)))?;
            }
            advance_in(tx, project_id, Stage::Verifying, config)
        })
    }

    pub fn coder_by_token(&self, token: &str) -> Result<CoderIdentity> {
        let row = self
            .conn()
            .query_row(
                "SELECT project_id, id, display_name, role FROM coders WHERE token_hash = ?1",
                [hash_token(token)],
                |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get::<_, String>(3)?)),
            )
            .optional()?
            .ok_or_else(|| StoreError::Forbidden("unknown coder token".into()))?;
        Ok(CoderIdentity { project_id: row.0, coder_id: row.1, display_name: row.2, role: enum_parse(&row.3)? })
    }

    pub fn coders(&self, project_id: &str) -> Result<Vec<Coder>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT id, display_name, role FROM coders WHERE project_id = ?1 ORDER BY id")?;
        let rows = stmt
            .query_map([project_id], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?)))?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter()
            .map(|(id, display_name, role)| Ok(Coder { id, display_name, role: enum_parse(&role)? }))
            .collect()
    }

    pub fn assignments(&self, project_id: &str) -> Result<Vec<Assignment>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT a.coder_id, a.doc_id, a.status, a.overlap, a.assigned_at FROM assignments a
             JOIN documents d ON d.project_id = a.project_id AND d.id = a.doc_id
             WHERE a.project_id = ?1 ORDER BY d.seq, a.coder_id",
        )?;
        let rows = stmt
            .query_map([project_id], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get::<_, bool>(3)?, r.get::<_, String>(4)?))
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter()
            .map(|(coder_id, doc_id, status, overlap, at)| {
                Ok(Assignment { coder_id, doc_id, status: enum_parse(&status)?, overlap, assigned_at: time(&at)? })
            })
            .collect()
    }

    pub fn assignments_for(&self, coder: &CoderIdentity) -> Result<Vec<AssignmentView>> {
        Ok(self
            .assignments(&coder.project_id)?
            .into_iter()
            .filter(|a| a.coder_id == coder.coder_id)
            .map(|a| AssignmentView { doc_id: a.doc_id, status: a.status, overlap: a.overlap, assigned_at: a.assigned_at })
            .collect())
    }

    /// The document as shown to `coder`; only assigned documents are visible.
    pub fn doc_for_coder(&self, coder: &CoderIdentity, doc_id: &str, with_provenance: bool) -> Result<DocView> {
        let project = self.project(&coder.project_id)?;
        let taxonomy = self.taxonomy(&project.taxonomy_sha)?;
        let (status, text) = {
            let conn = self.conn();
            let status: String = conn
                .query_row(
                    "SELECT status FROM assignments WHERE project_id = ?1 AND coder_id = ?2 AND doc_id = ?3",
                    params![coder.project_id, coder.coder_id, doc_id],
                    |r| r.get(0),
                )
                .optional()?
                .ok_or_else(|| StoreError::Forbidden(format!("document `{doc_id}` is not assigned to this coder")))?;
            let text: String = conn.query_row(
                "SELECT text FROM documents WHERE project_id = ?1 AND id = ?2",
                params![coder.project_id, doc_id],
                |r| r.get(0),
            )?;
            (enum_parse::<AssignmentStatus>(&status)?, text)
        };
        let candidates = self.candidates(&project.id)?.remove(doc_id).unwrap_or_default();
        let candidates = candidates
            .into_iter()
            .map(|c| {
                let label = taxonomy.label(&c.label);
                CandidateView {
                    name: taxonomy.display_name(&c.label).to_string(),
                    description: label.map(|l| l.description.clone()).unwrap_or_default(),
                    group: label.and_then(|l| l.group.clone()),
                    provenance_count: c.provenance.len(),
                    provenance: with_provenance.then_some(c.provenance),
                    label: c.label,
                }
            })
            .collect();
        let review = self
            .current_reviews(&project.id)?
            .into_iter()
            .find(|r| r.coder_id == coder.coder_id && r.doc_id == doc_id);
        Ok(DocView { id: doc_id.to_string(), text, status, candidates, review })
    }

    // ---- reviews ----

    /// Appends a review for one of `coder`'s assignments. A repeated
    /// idempotency key returns the original record without writing.
    pub fn submit_review(&self, coder: &CoderIdentity, input: ReviewInput) -> Result<SubmitOutcome> {
        self.write(|tx| {
            if let Some(key) = &input.idempotency_key {
                let hit = tx
                    .query_row(
                        "SELECT id, doc_id, decisions, none_apply, submitted_at, supersedes FROM reviews
                         WHERE project_id = ?1 AND coder_id = ?2 AND idempotency_key = ?3",
                        params![coder.project_id, coder.coder_id, key],
                        review_row,
                    )
                    .optional()?;
                if let Some(row) = hit {
                    let record = build_review(coder.coder_id.clone(), row)?;
                    if record.doc_id != input.doc_id {
                        return Err(StoreError::Conflict(format!(
                            "idempotency key was already used for document `{}`",
                            record.doc_id
                        )));
                    }
                    return Ok(SubmitOutcome { record, replayed: true });
                }
            }
            let stage: String = tx.query_row("SELECT stage FROM projects WHERE id = ?1", [&coder.project_id], |r| r.get(0))?;
            if Stage::parse(&stage)? != Stage::Verifying {
                return Err(StoreError::Conflict(format!("project is in stage `{stage}` and not accepting reviews")));
            }
            let status: String = tx
                .query_row(
                    "SELECT status FROM assignments WHERE project_id = ?1 AND coder_id = ?2 AND doc_id = ?3",
                    params![coder.project_id, coder.coder_id, input.doc_id],
                    |r| r.get(0),
                )
                .optional()?
                .ok_or_else(|| VerificationError::NotAssigned { coder: coder.coder_id.clone(), doc: input.doc_id.clone() })?;
            match (enum_parse::<AssignmentStatus>(&status)?, input.supersede) {
                (AssignmentStatus::Submitted, false) => {
                    return Err(VerificationError::AlreadySubmitted { coder: coder.coder_id.clone(), doc: input.doc_id.clone() }.into())
                }
                (AssignmentStatus::Pending, true) => {
                    return Err(StoreError::Invalid("nothing to supersede: no earlier submission".into()))
                }
                _ => {}
            }
            let shown: Vec<LabelId> = {
                let mut stmt = tx.prepare("SELECT label FROM candidates WHERE project_id = ?1 AND doc_id = ?2")?;
                let rows = stmt
                    .query_map(params![coder.project_id, input.doc_id], |r| r.get::<_, String>(0))?
                    .collect::<rusqlite::Result<Vec<_>>>()?;
                rows.into_iter().map(LabelId).collect()
            };
            let decisions = validate_decisions(&shown, input.decisions, input.none_apply)?;
            let previous: Option<String> = tx
                .query_row(
                    "SELECT id FROM reviews r WHERE project_id = ?1 AND coder_id = ?2 AND doc_id = ?3
                     AND NOT EXISTS (SELECT 1 FROM reviews s WHERE s.supersedes = r.id)
                     ORDER BY rowid DESC LIMIT 1",
                    params![coder.project_id, coder.coder_id, input.doc_id],
                    |r| r.get(0),
                )
                .optional()?;
            let record = VerificationRecord {
                id: uuid::Uuid::new_v4().to_string(),
                coder_id: coder.coder_id.clone(),
                doc_id: input.doc_id.clone(),
                decisions,
                none_apply: input.none_apply,
                submitted_at: Utc::now(),
                supersedes: previous,
            };
            tx.execute(
                "INSERT INTO reviews (id, project_id, coder_id, doc_id, decisions, none_apply, submitted_at, supersedes, idempotency_key)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
                params![
                    record.id,
                    coder.project_id,
                    record.coder_id,
                    record.doc_id,
                    to_json(&record.decisions)?,
                    record.none_apply,
                    record.submitted_at.to_rfc3339(),
                    record.supersedes,
                    input.idempotency_key
                ],
            )?;
            tx.execute(
                "UPDATE assignments SET status = ?1 WHERE project_id = ?2 AND coder_id = ?3 AND doc_id = ?4",
                params![enum_str(AssignmentStatus::Submitted), coder.project_id, coder.coder_id, input.doc_id],
            )?;
            Ok(SubmitOutcome { record, replayed: false })
        })
    }

    /// Every review ever written for the project, oldest first.
    pub fn all_reviews(&self, project_id: &str) -> Result<Vec<VerificationRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT id, doc_id, decisions, none_apply, submitted_at, supersedes, coder_id FROM reviews
             WHERE project_id = ?1 ORDER BY rowid",
        )?;
        let rows = stmt
            .query_map([project_id], |r| Ok((review_row(r)?, r.get::<_, String>(6)?)))?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter().map(|(row, coder)| build_review(coder, row)).collect()
    }

    /// Latest record per (coder, document).
    pub fn current_reviews(&self, project_id: &str) -> Result<Vec<VerificationRecord>> {
        let all = self.all_reviews(project_id)?;
        let superseded: HashSet<String> = all.iter().filter_map(|r| r.supersedes.clone()).collect();
        Ok(all.into_iter().filter(|r| !superseded.contains(&r.id)).collect())
    }

    pub fn submitted_count(&self, project_id: &str) -> Result<usize> {
        let n: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM assignments WHERE project_id = ?1 AND status = 'submitted'",
            [project_id],
            |r| r.get(0),
        )?;
        Ok(n as usize)
    }

    // ---- progress and resolution ----

    fn decided(
        &self,
        project: &Project,
        policy: ResolutionPolicy,
    ) -> Result<(BTreeMap<String, Vec<CandidateLabel>>, Vec<ResolvedDocument>, Vec<String>, Vec<Assignment>, Vec<VerificationRecord>)>
    {
        let taxonomy = self.taxonomy(&project.taxonomy_sha)?;
        let candidates = self.candidates(&project.id)?;
        let assignments = self.assignments(&project.id)?;
        let current = self.current_reviews(&project.id)?;
        let mut by_doc: HashMap<&str, Vec<&Assignment>> = HashMap::new();
        for a in &assignments {
            by_doc.entry(a.doc_id.as_str()).or_default().push(a);
        }
        let mut records: HashMap<&str, Vec<VerificationRecord>> = HashMap::new();
        for r in &current {
            records.entry(r.doc_id.as_str()).or_default().push(r.clone());
        }
        let mut resolved = Vec::new();
        let mut not_ready = Vec::new();
        let order = self.corpus_order(&project.id)?;
        for doc in order {
            let Some(cands) = candidates.get(&doc) else { continue };
            let ready = by_doc
                .get(doc.as_str())
                .is_some_and(|v| v.iter().all(|a| a.status == AssignmentStatus::Submitted));
            if !ready {
                not_ready.push(doc);
                continue;
            }
            let shown: Vec<LabelId> = cands.iter().map(|c| c.label.clone()).collect();
            let recs = records.remove(doc.as_str()).unwrap_or_default();
            resolved.push(resolve(&doc, &shown, &recs, policy, taxonomy.is_exclusive()));
        }
        Ok((candidates, resolved, not_ready, assignments, current))
    }

    fn corpus_order(&self, project_id: &str) -> Result<Vec<String>> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT id FROM documents WHERE project_id = ?1 ORDER BY seq")?;
        let ids = stmt.query_map([project_id], |r| r.get(0))?.collect::<rusqlite::Result<Vec<String>>>()?;
        Ok(ids)
    }

    /// Completion per coder and rejection/survival rates per label.
    /// Survival is computed under `policy` over documents whose every
    /// assignment is submitted.
    pub fn progress(&self, project_id: &str, policy: ResolutionPolicy) -> Result<Progress> {
        let project = self.project(project_id)?;
        let taxonomy = self.taxonomy(&project.taxonomy_sha)?;
        let (candidates, resolved, _, assignments, current) = self.decided(&project, policy)?;
        let coders = self
            .coders(&project.id)?
            .into_iter()
            .map(|c| {
                let mine: Vec<&Assignment> = assignments.iter().filter(|a| a.coder_id == c.id).collect();
                let submitted = mine.iter().filter(|a| a.status == AssignmentStatus::Submitted).count();
                CoderProgress {
                    completion_pct: pct(submitted, mine.len()),
                    assigned: mine.len(),
                    submitted,
                    coder_id: c.id,
                    display_name: c.display_name,
                    role: c.role,
                }
            })
            .collect();
        let labels = taxonomy
            .labels()
            .iter()
            .map(|l| {
                let shown = current.iter().filter(|r| r.decisions.contains_key(&l.id)).count();
                let rejected = current.iter().filter(|r| r.decisions.get(&l.id) == Some(&Decision::Reject)).count();
                let decided = resolved
                    .iter()
                    .filter(|r| candidates.get(&r.doc_id).is_some_and(|c| c.iter().any(|c| c.label == l.id)))
                    .count();
                let survived = resolved.iter().filter(|r| r.surviving_labels.contains(&l.id)).count();
                LabelProgress {
                    label: l.id.clone(),
                    name: l.display_name.clone(),
                    shown,
                    rejected,
                    rejection_rate: ratio(rejected, shown),
                    decided_documents: decided,
                    survived,
                    survival_rate: ratio(survived, decided),
                }
            })
            .collect();
        let submitted = assignments.iter().filter(|a| a.status == AssignmentStatus::Submitted).count();
        Ok(Progress {
            documents: self.document_count(&project.id)?,
            assignments: assignments.len(),
            submitted,
            completion_pct: pct(submitted, assignments.len()),
            project_id: project.id,
            stage: project.stage,
            policy,
            coders,
            labels,
        })
    }

    /// Resolves every ready document, persists the outcome and moves the
    /// project to `resolved` once nothing is left pending.
    pub fn resolve_project(&self, project_id: &str, policy: ResolutionPolicy, config: &serde_json::Value) -> Result<ResolveOutcome> {
        let project = self.project(project_id)?;
        if project.stage < Stage::Verifying {
            return Err(StoreError::Conflict(format!("project is in stage `{}`; assign coders first", project.stage.as_str())));
        }
        let (_, resolved, not_ready, _, _) = self.decided(&project, policy)?;
        self.write(|tx| {
            let now = Utc::now().to_rfc3339();
            for r in &resolved {
                tx.execute(
                    "INSERT OR REPLACE INTO resolutions (project_id, doc_id, surviving, policy, conflict, none_apply, records, resolved_at)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
                    params![
                        project.id,
                        r.doc_id,
                        to_json(&r.surviving_labels)?,
                        r.policy.to_string(),
                        r.conflict,
                        r.none_apply,
                        to_json(&r.records)?,
                        now
                    ],
                )?;
            }
            if not_ready.is_empty() && project.stage <= Stage::Resolved {
                advance_in(tx, &project.id, Stage::Resolved, config)?;
            }
            Ok(())
        })?;
        let conflicts = resolved.iter().filter(|r| r.conflict).map(|r| r.doc_id.clone()).collect();
        Ok(ResolveOutcome { resolved, not_ready, conflicts })
    }

    pub fn resolutions(&self, project_id: &str) -> Result<Vec<ResolvedDocument>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT r.doc_id, r.surviving, r.policy, r.conflict, r.none_apply, r.records FROM resolutions r
             JOIN documents d ON d.project_id = r.project_id AND d.id = r.doc_id
             WHERE r.project_id = ?1 ORDER BY d.seq",
        )?;
        let rows = stmt
            .query_map([project_id], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, bool>(3)?,
                    r.get::<_, bool>(4)?,
                    r.get::<_, String>(5)?,
                ))
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter()
            .map(|(doc_id, surviving, policy, conflict, none_apply, records)| {
                Ok(ResolvedDocument {
                    doc_id,
                    surviving_labels: from_json(&surviving)?,
                    policy: policy.parse().map_err(StoreError::Corrupt)?,
                    records: from_json(&records)?,
                    conflict,
                    none_apply,
                })
            })
            .collect()
    }

    // ---- completions and jobs ----

    pub fn insert_completions(&self, project_id: Option<&str>, job_id: Option<&str>, records: &[CompletionRecord]) -> Result<usize> {
        self.write(|tx| {
            let mut stmt = tx.prepare(
                "INSERT OR IGNORE INTO completions (id, project_id, job_id, backend, model, prompt_hash, raw_text,
                 input_tokens, output_tokens, latency_ms, cost, attempts, context, timestamp)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14)",
            )?;
            let mut n = 0;
            for c in records {
                n += stmt.execute(params![
                    c.id,
                    project_id,
                    job_id,
                    c.backend,
                    c.model,
                    c.prompt_hash,
                    c.raw_text,
                    c.input_tokens as i64,
                    c.output_tokens as i64,
                    c.latency_ms as i64,
                    c.cost,
                    c.attempts,
                    c.context,
                    c.timestamp.to_rfc3339()
                ])?;
            }
            Ok(n)
        })
    }

    pub fn completion_count(&self, job_id: &str) -> Result<usize> {
        let n: i64 = self.conn().query_row("SELECT COUNT(*) FROM completions WHERE job_id = ?1", [job_id], |r| r.get(0))?;
        Ok(n as usize)
    }

    pub fn create_job(&self, project_id: Option<&str>, kind: JobKind, id: Option<&str>, params: &serde_json::Value) -> Result<JobRow> {
        let now = Utc::now();
        let row = JobRow {
            id: id.map(str::to_string).unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            project_id: project_id.map(str::to_string),
            kind,
            status: JobStatus::Queued,
            params: params.clone(),
            progress: None,
            error: None,
            created_at: now,
            updated_at: now,
        };
        self.write(|tx| {
            tx.execute(
                "INSERT INTO jobs (id, project_id, kind, status, params, created_at, updated_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?6)",
                params![row.id, row.project_id, enum_str(kind), enum_str(row.status), to_json(params)?, now.to_rfc3339()],
            )
            .map_err(|e| constraint(e, format!("job `{}` already exists", row.id)))?;
            Ok(())
        })?;
        Ok(row)
    }

    pub fn update_job(
        &self,
        id: &str,
        status: JobStatus,
        progress: Option<&serde_json::Value>,
        error: Option<&str>,
    ) -> Result<()> {
        self.write(|tx| {
            let progress = progress.map(to_json).transpose()?;
            let n = tx.execute(
                "UPDATE jobs SET status = ?1, progress = COALESCE(?2, progress), error = ?3, updated_at = ?4 WHERE id = ?5",
                params![enum_str(status), progress, error, Utc::now().to_rfc3339(), id],
            )?;
            if n == 0 {
                return Err(StoreError::NotFound(format!("job `{id}`")));
            }
            Ok(())
        })
    }

    fn job_rows(&self, sql: &str, arg: &str) -> Result<Vec<JobRow>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(sql)?;
        let rows = stmt
            .query_map([arg], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, Option<String>>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, String>(4)?,
                    r.get::<_, Option<String>>(5)?,
                    r.get::<_, Option<String>>(6)?,
                    r.get::<_, String>(7)?,
                    r.get::<_, String>(8)?,
                ))
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter()
            .map(|(id, project_id, kind, status, params, progress, error, created, updated)| {
                Ok(JobRow {
                    id,
                    project_id,
                    kind: enum_parse(&kind)?,
                    status: enum_parse(&status)?,
                    params: from_json(&params)?,
                    progress: progress.as_deref().map(from_json).transpose()?,
                    error,
                    created_at: time(&created)?,
                    updated_at: time(&updated)?,
                })
            })
            .collect()
    }

    const JOB_COLUMNS: &'static str =
        "SELECT id, project_id, kind, status, params, progress, error, created_at, updated_at FROM jobs";

    pub fn job(&self, id: &str) -> Result<JobRow> {
        self.job_rows(&format!("{} WHERE id = ?1", Self::JOB_COLUMNS), id)?
            .pop()
            .ok_or_else(|| StoreError::NotFound(format!("job `{id}`")))
    }

    pub fn jobs(&self, project_id: &str) -> Result<Vec<JobRow>> {
        self.job_rows(&format!("{} WHERE project_id = ?1 ORDER BY created_at, id", Self::JOB_COLUMNS), project_id)
    }
}

type ReviewRow = (String, String, String, bool, String, Option<String>);

fn review_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<ReviewRow> {
    Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?))
}

fn build_review(coder_id: String, (id, doc_id, decisions, none_apply, at, supersedes): ReviewRow) -> Result<VerificationRecord> {
    Ok(VerificationRecord {
        id,
        coder_id,
        doc_id,
        decisions: from_json(&decisions)?,
        none_apply,
        submitted_at: time(&at)?,
        supersedes,
    })
}

fn advance_in(tx: &Transaction<'_>, id: &str, to: Stage, config: &serde_json::Value) -> Result<()> {
    let current: String = tx
        .query_row("SELECT stage FROM projects WHERE id = ?1", [id], |r| r.get(0))
        .optional()?
        .ok_or_else(|| StoreError::NotFound(format!("project `{id}`")))?;
    let current = Stage::parse(&current)?;
    if to < current {
        return Err(StoreError::Conflict(format!(
            "project is at stage `{}`; moving back to `{}` is not allowed",
            current.as_str(),
            to.as_str()
        )));
    }
    let now = Utc::now().to_rfc3339();
    let config = to_json(config)?;
    tx.execute(
        "UPDATE projects SET stage = ?1, config = ?2, updated_at = ?3 WHERE id = ?4",
        params![to.as_str(), config, now, id],
    )?;
    tx.execute(
        "INSERT INTO project_revisions (project_id, stage, config, created_at) VALUES (?1, ?2, ?3, ?4)",
        params![id, to.as_str(), config, now],
    )?;
    Ok(())
}

fn constraint(e: rusqlite::Error, message: String) -> StoreError {
    match e {
        rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
            StoreError::Conflict(message)
        }
        other => other.into(),
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn pct(num: usize, den: usize) -> Option<f64> {
    ratio(num, den).map(|r| r * 100.0)
}
