//! Uniform access to chat-completion backends.
//!
//! Every backend, local inference server or hosted API, is reached through
//! the same JSON-over-HTTP chat-completion shape. [`LlmClient`] layers a
//! concurrency bound, retry with exponential backoff, token/cost accounting
//! and journaling on top of a [`Transport`]. Parsing model text into
//! taxonomy labels lives in [`parse`]; prompt rendering in [`template`].

mod client;
mod config;
mod http;
pub mod mock;
pub mod parse;
pub mod template;

pub use client::{AttemptFailure, CompletionRecord, GatewayError, LlmClient};
pub use config::{AuthConfig, BackendConfig, Pricing, RetryPolicy};
pub use http::HttpTransport;
pub use parse::{parse_choices, parse_labels, ParseStatus, ParsedLabels};
pub use template::{render, Choice, LabelRendering, PromptTemplate, TemplateError, TemplateRegistry};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

/// Request body sent to the chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

/// Assistant text plus usage counts extracted from a response.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("http status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl TransportError {
    /// 429, 5xx, timeouts and connection failures are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { code, .. } => *code == 429 || *code >= 500,
            TransportError::Timeout | TransportError::Connect(_) => true,
            TransportError::Protocol(_) => false,
        }
    }
}

/// One round trip to a backend. Implementations do not retry.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, request: &ChatRequest) -> Result<RawCompletion, TransportError>;
}
