use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::GatewayError;

fn default_path() -> String {
    "/v1/chat/completions".into()
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_header() -> String {
    "Authorization".into()
}

fn default_scheme() -> Option<String> {
    Some("Bearer".into())
}

/// Secret reference: the value is read from `env` at client construction and
/// sent in `header`, optionally prefixed by `scheme`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthConfig {
    #[serde(default = "default_header")]
    pub header: String,
    pub env: String,
    #[serde(default = "default_scheme")]
    pub scheme: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1 = first retry): `base * 2^(retry-1)`, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }
}

/// Price per token in currency units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub per_input_token: f64,
    pub per_output_token: f64,
}

impl Pricing {
    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        input_tokens as f64 * self.per_input_token + output_tokens as f64 * self.per_output_token
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    #[serde(default)]
    pub auth: Option<AuthConfig>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub price: Option<Pricing>,
    #[serde(default)]
    pub temperature: f64,
    /// Informational: marks an endpoint serving a fine-tuned model.
    #[serde(default)]
    pub fine_tuned: bool,
}

impl BackendConfig {
    /// Minimal config for tests and mocks.
    pub fn named(name: impl Into<String>) -> Self {
        BackendConfig {
            name: name.into(),
            base_url: "http://127.0.0.1".into(),
            path: default_path(),
            model: "mock".into(),
            auth: None,
            max_concurrency: default_concurrency(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
            price: None,
            temperature: 0.0,
            fine_tuned: false,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn endpoint(&self) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            self.path.trim_start_matches('/')
        )
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(format!("backend `{}`: {m}", self.name)));
        if self.max_concurrency < 1 {
            return bad("max_concurrency must be at least 1".into());
        }
        if self.retry.max_attempts < 1 {
            return bad("retry.max_attempts must be at least 1".into());
        }
        if let Some(p) = &self.price {
            if !(p.per_input_token >= 0.0 && p.per_output_token >= 0.0) {
                return bad("prices must be non-negative".into());
            }
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        Ok(())
    }
}
