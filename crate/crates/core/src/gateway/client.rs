use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use super::{BackendConfig, ChatMessage, ChatRequest, RawCompletion, Transport, TransportError};
use crate::jsonl::AppendLog;

/// One journaled model completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub id: String,
    pub backend: String,
    pub model: String,
    pub prompt_hash: String,
    pub raw_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    /// `input_tokens * per_input + output_tokens * per_output`; absent without prices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    pub timestamp: DateTime<Utc>,
    pub attempts: u32,
    /// Caller-supplied tag, e.g. `doc-17/iterative/stage-a/3`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptFailure {
    pub attempt: u32,
    pub error: String,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend `{backend}` unavailable after {} attempts: {}", .attempts.len(), summarize(.attempts))]
    Unavailable {
        backend: String,
        attempts: Vec<AttemptFailure>,
    },
    #[error("backend `{backend}` rejected request with status {status}: {body}")]
    Rejected {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("backend `{backend}` returned a malformed response: {message}")]
    Protocol { backend: String, message: String },
    #[error("failed to journal completion: {0}")]
    Journal(#[from] std::io::Error),
}

impl GatewayError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, GatewayError::Unavailable { .. })
    }
}

fn summarize(attempts: &[AttemptFailure]) -> String {
    attempts
        .last()
        .map(|a| a.error.clone())
        .unwrap_or_default()
}

/// Digest identifying a prompt independent of when it was sent.
pub fn prompt_hash(model: &str, messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(messages).expect("messages serialize"));
    hex::encode(h.finalize())
}

/// A backend behind a concurrency bound, retry policy and optional journal.
pub struct LlmClient {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    limiter: Arc<Semaphore>,
    journal: Option<Arc<AppendLog>>,
    calls: AtomicU64,
    attempts: AtomicU64,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.config.name)
            .field("calls", &self.calls())
            .finish()
    }
}

impl LlmClient {
    pub fn new(config: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(LlmClient {
            limiter: Arc::new(Semaphore::new(config.max_concurrency)),
            config,
            transport,
            journal: None,
            calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        })
    }

    /// Client over HTTP; reads the auth secret from the environment.
    pub fn http(config: BackendConfig) -> Result<Self, GatewayError> {
        let transport = super::HttpTransport::new(&config)?;
        Self::new(config, Arc::new(transport))
    }

    pub fn with_journal(mut self, journal: Arc<AppendLog>) -> Self {
        self.journal = Some(journal);
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    /// Logical completions requested so far (retries excluded).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Transport round trips so far (retries included).
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub async fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionRecord, GatewayError> {
        self.complete_tagged(messages, None).await
    }

    /// Sends the prompt, retrying transient failures with exponential
    /// backoff. Successful completions are journaled before returning.
    pub async fn complete_tagged(
        &self,
        messages: &[ChatMessage],
        context: Option<String>,
    ) -> Result<CompletionRecord, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let (raw, attempt) = self.send_with_retry(messages).await?;
        let record = CompletionRecord {
            id: uuid::Uuid::new_v4().to_string(),
            backend: self.config.name.clone(),
            model: self.config.model.clone(),
            prompt_hash: prompt_hash(&self.config.model, messages),
            raw_text: raw.text,
            input_tokens: raw.input_tokens,
            output_tokens: raw.output_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
            cost: self.config.price.map(|p| p.cost(raw.input_tokens, raw.output_tokens)),
            timestamp: Utc::now(),
            attempts: attempt,
            context,
        };
        if let Some(j) = &self.journal {
            j.append(&record)?;
        }
        Ok(record)
    }

    /// A minimal request that is neither counted nor journaled, to check the
    /// backend answers before starting a long job.
    pub async fn probe(&self) -> Result<(), GatewayError> {
        self.send_with_retry(&[ChatMessage::user("ping")]).await.map(|_| ())
    }

    async fn send_with_retry(&self, messages: &[ChatMessage]) -> Result<(RawCompletion, u32), GatewayError> {
        let _permit = self.limiter.acquire().await.expect("semaphore never closed");
        let request = ChatRequest {
            model: self.config.model.clone(),
            messages: messages.to_vec(),
            temperature: self.config.temperature,
        };
        let backend = self.config.name.clone();
        let mut failures = Vec::new();

        for attempt in 1..=self.config.retry.max_attempts {
            if attempt > 1 {
                tokio::time::sleep(self.config.retry.backoff(attempt - 1)).await;
            }
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let outcome = match tokio::time::timeout(self.config.timeout(), self.transport.send(&request)).await {
                Ok(r) => r,
                Err(_) => Err(TransportError::Timeout),
            };
            match outcome {
                Ok(raw) => return Ok((raw, attempt)),
                Err(TransportError::Status { code, body }) if code == 401 || code == 403 => {
                    return Err(GatewayError::Config(format!(
                        "backend `{backend}` refused credentials (status {code}): {body}"
                    )));
                }
                Err(e) if e.is_transient() => {
                    tracing::debug!(backend = %backend, attempt, error = %e, "transient failure");
                    failures.push(AttemptFailure { attempt, error: e.to_string() });
                }
                Err(TransportError::Status { code, body }) => {
                    return Err(GatewayError::Rejected { backend, status: code, body });
                }
                Err(e) => {
                    return Err(GatewayError::Protocol { backend, message: e.to_string() });
                }
            }
        }
        Err(GatewayError::Unavailable { backend, attempts: failures })
    }
}
