use async_trait::async_trait;
use serde::Deserialize;

use super::{BackendConfig, ChatRequest, GatewayError, RawCompletion, Transport, TransportError};

/// Chat-completion transport over HTTP.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::Client,
    endpoint: String,
    auth: Option<(String, String)>,
}

#[derive(Deserialize)]
struct ResponseBody {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl HttpTransport {
    /// Resolves the auth secret from the environment; a missing variable is a
    /// configuration error.
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let auth = match &config.auth {
            Some(a) => {
                let secret = std::env::var(&a.env).map_err(|_| {
                    GatewayError::Config(format!(
                        "backend `{}`: environment variable `{}` is not set",
                        config.name, a.env
                    ))
                })?;
                let value = match &a.scheme {
                    Some(s) => format!("{s} {secret}"),
                    None => secret,
                };
                Some((a.header.clone(), value))
            }
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpTransport {
            client,
            endpoint: config.endpoint(),
            auth,
        })
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, request: &ChatRequest) -> Result<RawCompletion, TransportError> {
        let mut req = self.client.post(&self.endpoint).json(request);
        if let Some((h, v)) = &self.auth {
            req = req.header(h.as_str(), v.as_str());
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(TransportError::Status { code: status.as_u16(), body });
        }
        let parsed: ResponseBody =
            serde_json::from_str(&body).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Protocol("response has no assistant message".into()))?;
        let usage = parsed
            .usage
            .ok_or_else(|| TransportError::Protocol("response has no usage counts".into()))?;
        Ok(RawCompletion {
            text,
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
        })
    }
}
