//! HTTP JSON API under `/api/v1`, plus the static web UI.
//!
//! Coder endpoints authenticate with the capability token issued by
//! `assign` and only ever see that coder's assignments. Operator endpoints
//! require the operator token when one is configured.

use std::path::PathBuf;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use labelforge_core::corpus::{Corpus, Document};
use labelforge_core::taxonomy::{Taxonomy, TaxonomyFile};
use labelforge_core::verification::{reliability, ResolutionPolicy, ReliabilityReport};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use tower_http::services::{ServeDir, ServeFile};

use crate::jobs::{CrowdParams, JobError, Runner, ScaleParams};
use crate::store::{CoderIdentity, Stage, Store, StoreError};

pub const OPENAPI: &str = include_str!("openapi.json");

#[derive(Clone)]
pub struct AppState {
    pub runner: Runner,
    pub operator_token: Option<String>,
}

impl AppState {
    fn store(&self) -> Arc<Store> {
        Arc::clone(&self.runner.store)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(status = %self.status, "{}", self.message);
        }
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Forbidden(_) => StatusCode::FORBIDDEN,
            StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::Store(s) => s.into(),
            JobError::UnknownBackend(_) | JobError::Invalid(_) | JobError::WrongKind { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            JobError::Running(_) => ApiError::new(StatusCode::CONFLICT, e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn operator(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match &state.operator_token {
        None => Ok(()),
        Some(expected) if bearer(headers) == Some(expected.as_str()) => Ok(()),
        Some(_) => Err(ApiError::new(StatusCode::UNAUTHORIZED, "operator token required")),
    }
}

async fn coder(state: &AppState, headers: &HeaderMap) -> ApiResult<CoderIdentity> {
    let token = bearer(headers)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "coder token required"))?
        .to_string();
    let store = state.store();
    blocking(move || {
        store.coder_by_token(&token).map_err(|e| match e {
            StoreError::Forbidden(m) => ApiError::new(StatusCode::UNAUTHORIZED, m),
            other => other.into(),
        })
    })
    .await
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/openapi.json", get(openapi))
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{id}", get(get_project).patch(rename_project).delete(delete_project))
        .route("/projects/{id}/documents", post(add_documents))
        .route("/projects/{id}/taxonomy", get(project_taxonomy))
        .route("/projects/{id}/progress", get(progress))
        .route("/projects/{id}/reliability", get(project_reliability))
        .route("/reliability", get(reliability_by_query))
        .route("/projects/{id}/jobs", get(list_jobs).post(start_job))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/halt", post(halt_job))
        .route("/me", get(me))
        .route("/taxonomy", get(coder_taxonomy))
        .route("/assignments", get(assignments))
        .route("/docs/{id}", get(doc))
        .route("/reviews", post(submit_review))
        .with_state(state);
    // Unversioned alias for clients written against the bare prefix.
    let app = Router::new().nest("/api/v1", api.clone()).nest("/api", api);
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app,
    }
}

async fn health(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store();
    let version = blocking(move || Ok(store.version()?)).await?;
    Ok(Json(serde_json::json!({ "status": "ok", "schema_version": version })))
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI)
}

// ---- operator endpoints ----

#[derive(Deserialize)]
struct NewProject {
    name: String,
    taxonomy: TaxonomyFile,
    #[serde(default)]
    documents: Vec<Document>,
}

#[derive(Serialize)]
struct ProjectDetail {
    #[serde(flatten)]
    project: crate::store::Project,
    documents: usize,
    revisions: Vec<crate::store::Revision>,
}

async fn list_projects(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<Vec<crate::store::Project>>> {
    operator(&state, &headers)?;
    let store = state.store();
    Ok(Json(blocking(move || Ok(store.list_projects()?)).await?))
}

async fn create_project(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<NewProject>,
) -> ApiResult<(StatusCode, Json<ProjectDetail>)> {
    operator(&state, &headers)?;
    let taxonomy =
        Taxonomy::from_file(body.taxonomy).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let config = serde_json::to_value(&state.runner.config.defaults).unwrap_or_default();
    let store = state.store();
    let detail = blocking(move || {
        let docs = if body.documents.is_empty() {
            Vec::new()
        } else {
            checked_documents(body.documents, &taxonomy)?
        };
        let project = store.create_project(&body.name, &taxonomy, None, &config)?;
        store.insert_documents(&project.id, &docs)?;
        Ok(ProjectDetail { documents: docs.len(), revisions: store.revisions(&project.id)?, project })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(detail)))
}

/// Validates documents against the taxonomy the way ingest does.
fn checked_documents(docs: Vec<Document>, taxonomy: &Taxonomy) -> ApiResult<Vec<Document>> {
    let corpus = Corpus::new(docs, Arc::new(taxonomy.clone()))
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(corpus.documents().to_vec())
}

async fn get_project(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<ProjectDetail>> {
    operator(&state, &headers)?;
    let store = state.store();
    Ok(Json(
        blocking(move || {
            let project = store.project(&id)?;
            Ok(ProjectDetail {
                documents: store.document_count(&project.id)?,
                revisions: store.revisions(&project.id)?,
                project,
            })
        })
        .await?,
    ))
}

#[derive(Deserialize)]
struct Rename {
    name: String,
}

async fn rename_project(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(body): Json<Rename>,
) -> ApiResult<Json<crate::store::Project>> {
    operator(&state, &headers)?;
    let store = state.store();
    Ok(Json(
        blocking(move || {
            let project = store.project(&id)?;
            Ok(store.rename_project(&project.id, &body.name)?)
        })
        .await?,
    ))
}

async fn delete_project(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<StatusCode> {
    operator(&state, &headers)?;
    let store = state.store();
    blocking(move || {
        let project = store.project(&id)?;
        Ok(store.delete_project(&project.id)?)
    })
    .await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn add_documents(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(docs): Json<Vec<Document>>,
) -> ApiResult<Json<serde_json::Value>> {
    operator(&state, &headers)?;
    let store = state.store();
    let added = blocking(move || {
        let project = store.project(&id)?;
        if project.stage != Stage::Ingested {
            return Err(StoreError::Conflict(format!(
                "documents can only be added before classification (stage is `{}`)",
                project.stage.as_str()
            ))
            .into());
        }
        let taxonomy = store.project_taxonomy(&project)?;
        let docs = checked_documents(docs, &taxonomy)?;
        Ok(store.insert_documents(&project.id, &docs)?)
    })
    .await?;
    Ok(Json(serde_json::json!({ "added": added })))
}

async fn project_taxonomy(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<TaxonomyFile>> {
    operator(&state, &headers)?;
    let store = state.store();
    Ok(Json(
        blocking(move || {
            let project = store.project(&id)?;
            Ok(store.project_taxonomy(&project)?.to_file())
        })
        .await?,
    ))
}

#[derive(Deserialize)]
struct PolicyQuery {
    policy: Option<String>,
}

async fn progress(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<PolicyQuery>,
) -> ApiResult<Json<crate::store::Progress>> {
    operator(&state, &headers)?;
    let policy: ResolutionPolicy = match q.policy {
        Some(p) => p.parse().map_err(|e: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?,
        None => state.runner.config.defaults.policy,
    };
    let store = state.store();
    Ok(Json(
        blocking(move || {
            let project = store.project(&id)?;
            Ok(store.progress(&project.id, policy)?)
        })
        .await?,
    ))
}

/// Agreement on the overlap set. `computable` is false when no kappa value
/// is defined (no overlap documents, or chance agreement of 1).
#[derive(Serialize)]
pub struct ReliabilityView {
    pub project_id: String,
    pub exclusive: bool,
    pub computable: bool,
    #[serde(flatten)]
    pub report: ReliabilityReport,
}

pub fn reliability_view(store: &Store, project_key: &str) -> Result<ReliabilityView, StoreError> {
    let project = store.project(project_key)?;
    let taxonomy = store.project_taxonomy(&project)?;
    let current = store.current_reviews(&project.id)?;
    let refs: Vec<_> = current.iter().collect();
    let report = reliability(&refs, taxonomy.is_exclusive());
    let computable = report.overlap_documents > 0
        && (report.fleiss.as_ref().is_some_and(|k| k.is_defined())
            || report.pairwise.iter().any(|p| p.kappa.is_defined())
            || report.per_label_macro.is_some());
    Ok(ReliabilityView { project_id: project.id, exclusive: taxonomy.is_exclusive(), computable, report })
}

async fn project_reliability(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<ReliabilityView>> {
    operator(&state, &headers)?;
    let store = state.store();
    Ok(Json(blocking(move || Ok(reliability_view(&store, &id)?)).await?))
}

#[derive(Deserialize)]
struct ProjectQuery {
    project: String,
}

async fn reliability_by_query(state: State<AppState>, headers: HeaderMap, Query(q): Query<ProjectQuery>) -> ApiResult<Json<ReliabilityView>> {
    project_reliability(state, headers, Path(q.project)).await
}

async fn list_jobs(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Vec<crate::store::JobRow>>> {
    operator(&state, &headers)?;
    let runner = state.runner.clone();
    Ok(Json(
        blocking(move || {
            let project = runner.store.project(&id)?;
            let ids: Vec<String> = runner.store.jobs(&project.id)?.into_iter().map(|j| j.id).collect();
            ids.iter().map(|j| runner.status(j).map_err(ApiError::from)).collect()
        })
        .await?,
    ))
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JobRequest {
    Crowd(CrowdParams),
    Scale(ScaleParams),
}

async fn start_job(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(body): Json<JobRequest>,
) -> ApiResult<(StatusCode, Json<crate::store::JobRow>)> {
    operator(&state, &headers)?;
    let runner = state.runner.clone();
    let job = blocking(move || match body {
        JobRequest::Crowd(p) => Ok(runner.create_crowd(&id, &p)?),
        JobRequest::Scale(p) => Ok(runner.create_scale(Some(&id), None, &p)?),
    })
    .await?;
    spawn_job(state.runner.clone(), job.id.clone(), job.kind);
    Ok((StatusCode::ACCEPTED, Json(job)))
}

/// Runs a job on the blocking pool with its own executor handle; the job
/// row records the outcome.
pub fn spawn_job(runner: Runner, id: String, kind: crate::store::JobKind) {
    let handle = tokio::runtime::Handle::current();
    tokio::task::spawn_blocking(move || {
        let outcome = match kind {
            crate::store::JobKind::Crowd => handle.block_on(runner.execute_crowd(&id)).map(|_| ()),
            crate::store::JobKind::Scale => handle.block_on(runner.execute_scale(&id)).map(|_| ()),
        };
        if let Err(e) = outcome {
            tracing::warn!(job = %id, "job failed: {e}");
        }
    });
}

async fn job_status(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<crate::store::JobRow>> {
    operator(&state, &headers)?;
    let runner = state.runner.clone();
    Ok(Json(blocking(move || Ok(runner.status(&id)?)).await?))
}

async fn halt_job(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    operator(&state, &headers)?;
    if state.runner.halt(&id) {
        Ok(Json(serde_json::json!({ "job": id, "halting": true })))
    } else {
        Err(ApiError::new(StatusCode::CONFLICT, format!("job `{id}` is not running in this process")))
    }
}

// ---- coder endpoints ----

async fn me(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<CoderIdentity>> {
    Ok(Json(coder(&state, &headers).await?))
}

async fn coder_taxonomy(State(state): State<AppState>, headers: HeaderMap) -> ApiResult<Json<TaxonomyFile>> {
    let who = coder(&state, &headers).await?;
    let store = state.store();
    Ok(Json(
        blocking(move || {
            let project = store.project(&who.project_id)?;
            Ok(store.project_taxonomy(&project)?.to_file())
        })
        .await?,
    ))
}

#[derive(Deserialize)]
struct CoderQuery {
    coder: Option<String>,
}

#[derive(Serialize)]
struct AssignmentList {
    coder_id: String,
    total: usize,
    submitted: usize,
    assignments: Vec<crate::store::AssignmentView>,
}

async fn assignments(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<CoderQuery>,
) -> ApiResult<Json<AssignmentList>> {
    let who = coder(&state, &headers).await?;
    if q.coder.as_deref().is_some_and(|c| c != who.coder_id) {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "a token only grants access to its own coder's assignments"));
    }
    let store = state.store();
    Ok(Json(
        blocking(move || {
            let assignments = store.assignments_for(&who)?;
            let submitted = assignments
                .iter()
                .filter(|a| a.status == labelforge_core::verification::AssignmentStatus::Submitted)
                .count();
            Ok(AssignmentList { coder_id: who.coder_id, total: assignments.len(), submitted, assignments })
        })
        .await?,
    ))
}

#[derive(Deserialize)]
struct DocQuery {
    #[serde(default)]
    provenance: bool,
}

async fn doc(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<DocQuery>,
) -> ApiResult<Json<crate::store::DocView>> {
    let who = coder(&state, &headers).await?;
    let store = state.store();
    Ok(Json(blocking(move || Ok(store.doc_for_coder(&who, &id, q.provenance)?)).await?))
}

async fn submit_review(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(mut body): Json<crate::store::ReviewInput>,
) -> ApiResult<(StatusCode, Json<crate::store::SubmitOutcome>)> {
    let who = coder(&state, &headers).await?;
    if let Some(key) = headers.get("idempotency-key").and_then(|v| v.to_str().ok()) {
        match &body.idempotency_key {
            Some(k) if k != key => {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "Idempotency-Key header and body disagree"))
            }
            _ => body.idempotency_key = Some(key.to_string()),
        }
    }
    let store = state.store();
    let outcome = blocking(move || Ok(store.submit_review(&who, body)?)).await?;
    let status = if outcome.replayed { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(outcome)))
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState, static_dir: Option<PathBuf>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {bind}: {e}"))?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await?;
    Ok(())
}
