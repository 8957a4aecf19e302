#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use labelforge::api::{router, AppState};
use labelforge::config::AppConfig;
use labelforge::jobs::{ClientFactory, Runner};
use labelforge::store::{new_token, Store};
use labelforge_core::corpus::Document;
use labelforge_core::gateway::mock::{MockReply, ScriptedTransport};
use labelforge_core::gateway::{BackendConfig, LlmClient, RetryPolicy};
use labelforge_core::strategies::{CandidateLabel, CrowdResult, Provenance, StrategyKind};
use labelforge_core::taxonomy::{fixtures, LabelId};
use labelforge_core::verification::{assign, AssignOptions, Coder, CoderRole};

pub const CORE_FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(CORE_FIXTURES).join(rel)
}

pub fn backend(name: &str) -> BackendConfig {
    let mut b = BackendConfig::named(name);
    b.retry = RetryPolicy { max_attempts: 1, backoff_base_ms: 1, backoff_cap_ms: 1 };
    b
}

pub fn config(dir: &Path, backends: &[&str]) -> AppConfig {
    AppConfig {
        store: dir.join("lf.db"),
        work_dir: dir.join("work"),
        backends: backends.iter().map(|b| backend(b)).collect(),
        ..AppConfig::default()
    }
}

/// Every backend answers with the same fixed text.
pub fn constant_clients(answers: &[(&str, &str)]) -> ClientFactory {
    let answers: Vec<(String, String)> = answers.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    Arc::new(move |cfg: &BackendConfig| {
        let text = answers.iter().find(|(n, _)| *n == cfg.name).map(|(_, t)| t.clone()).unwrap_or_default();
        LlmClient::new(cfg.clone(), Arc::new(ScriptedTransport::constant(text)))
    })
}

pub fn scripted_clients(f: impl Fn(&str, &labelforge_core::gateway::ChatRequest) -> MockReply + Send + Sync + 'static) -> ClientFactory {
    let f = Arc::new(f);
    Arc::new(move |cfg: &BackendConfig| {
        let f = Arc::clone(&f);
        let name = cfg.name.clone();
        LlmClient::new(cfg.clone(), Arc::new(ScriptedTransport::from_fn(move |req| f(&name, req))))
    })
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub store: Arc<Store>,
    pub project: String,
    /// (coder id, token)
    pub tokens: Vec<(String, String)>,
}

impl Fixture {
    pub fn token(&self, coder: &str) -> &str {
        &self.tokens.iter().find(|(c, _)| c == coder).unwrap().1
    }

    pub fn assigned_to(&self, coder: &str) -> Vec<String> {
        self.store
            .assignments(&self.project)
            .unwrap()
            .into_iter()
            .filter(|a| a.coder_id == coder)
            .map(|a| a.doc_id)
            .collect()
    }
}

/// A dataverse project of `n` documents, each with candidates physics and
/// chemistry, assigned to the given coders.
pub fn verifying_project(n: usize, coders: &[&str], overlap: f64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let (store, _) = Store::open(dir.path().join("lf.db")).unwrap();
    let taxonomy = fixtures::dataverse();
    let project = store.create_project("dv", &taxonomy, None, &serde_json::json!({})).unwrap();
    let docs: Vec<Document> = (0..n)
        .map(|i| Document { id: format!("d{i}"), text: format!("dataset {i}"), true_labels: None, source: "test".into() })
        .collect();
    store.insert_documents(&project.id, &docs).unwrap();
    let prov = Provenance {
        strategy: "a/zero_shot".into(),
        backend: "a".into(),
        kind: StrategyKind::ZeroShot,
        completion_ids: vec![],
        fallback: false,
    };
    let results: Vec<CrowdResult> = docs
        .iter()
        .map(|d| CrowdResult {
            doc_id: d.id.clone(),
            candidates: ["physics", "chemistry"]
                .iter()
                .map(|l| CandidateLabel {
                    doc_id: d.id.clone(),
                    label: LabelId::new(*l),
                    provenance: vec![prov.clone()],
                    first_seen: Utc::now(),
                })
                .collect(),
            failures: vec![],
        })
        .collect();
    store.save_candidates(&project.id, &results).unwrap();
    let coder_list: Vec<Coder> = coders.iter().map(|c| Coder::new(*c, CoderRole::Expert)).collect();
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let assignments =
        assign(&ids, &coder_list, &AssignOptions { overlap_fraction: overlap, overlap_coders: 2, ..Default::default() }).unwrap();
    let issued: Vec<(Coder, String)> = coder_list.into_iter().map(|c| (c, new_token())).collect();
    store.add_assignments(&project.id, &issued, &assignments, &serde_json::json!({})).unwrap();
    let tokens = issued.into_iter().map(|(c, t)| (c.id, t)).collect();
    Fixture { store: Arc::new(store), project: project.id, tokens, dir }
}

pub struct Server {
    pub base: String,
    pub http: reqwest::Client,
    pub runner: Runner,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}/api/v1{}", self.base, path)
    }
}

pub async fn start(store: Arc<Store>, config: AppConfig, clients: ClientFactory, operator_token: Option<&str>) -> Server {
    start_with_static(store, config, clients, operator_token, None).await
}

pub async fn start_with_static(
    store: Arc<Store>,
    config: AppConfig,
    clients: ClientFactory,
    operator_token: Option<&str>,
    static_dir: Option<PathBuf>,
) -> Server {
    let runner = Runner::new(store, Arc::new(config), clients).unwrap();
    let state = AppState { runner: runner.clone(), operator_token: operator_token.map(str::to_string) };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(state, static_dir)).await.unwrap();
    });
    Server { base: format!("http://{addr}"), http: reqwest::Client::new(), runner }
}
