//! Scripted in-process transport for tests, demos and fault injection.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;

use super::{ChatRequest, RawCompletion, Transport, TransportError};

#[derive(Debug, Clone)]
pub enum MockReply {
    Text(String),
    Status(u16),
    Disconnect,
    Delay(Duration, Box<MockReply>),
}

type Responder = Box<dyn Fn(&ChatRequest) -> MockReply + Send + Sync>;

enum Script {
    Fixed(MockReply),
    Queue(Mutex<VecDeque<MockReply>>),
    Func(Responder),
}

/// Answers requests from a script and counts traffic.
pub struct ScriptedTransport {
    script: Script,
    usage: Option<(u64, u64)>,
    latency: Duration,
    sent: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl ScriptedTransport {
    fn with_script(script: Script) -> Self {
        ScriptedTransport {
            script,
            usage: None,
            latency: Duration::ZERO,
            sent: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        Self::with_script(Script::Fixed(MockReply::Text(text.into())))
    }

    /// Replays `replies` in order; the last one repeats once the queue drains.
    pub fn sequence(replies: Vec<MockReply>) -> Self {
        Self::with_script(Script::Queue(Mutex::new(replies.into())))
    }

    /// Computes each reply from the request.
    pub fn from_fn(f: impl Fn(&ChatRequest) -> MockReply + Send + Sync + 'static) -> Self {
        Self::with_script(Script::Func(Box::new(f)))
    }

    /// Fixed token usage per response. Without it, usage is the whitespace
    /// word count of prompt and reply.
    pub fn with_usage(mut self, input_tokens: u64, output_tokens: u64) -> Self {
        self.usage = Some((input_tokens, output_tokens));
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    /// Highest number of requests observed in flight at once.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn next_reply(&self, request: &ChatRequest) -> MockReply {
        match &self.script {
            Script::Fixed(r) => r.clone(),
            Script::Queue(q) => {
                let mut q = q.lock().unwrap();
                if q.len() > 1 {
                    q.pop_front().unwrap()
                } else {
                    q.front().cloned().unwrap_or(MockReply::Status(500))
                }
            }
            Script::Func(f) => f(request),
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Transport for ScriptedTransport {
    async fn send(&self, request: &ChatRequest) -> Result<RawCompletion, TransportError> {
        self.sent.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlight(&self.in_flight);

        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        let mut reply = self.next_reply(request);
        loop {
            match reply {
                MockReply::Delay(d, inner) => {
                    tokio::time::sleep(d).await;
                    reply = *inner;
                }
                MockReply::Status(code) => {
                    return Err(TransportError::Status { code, body: format!("scripted {code}") })
                }
                MockReply::Disconnect => return Err(TransportError::Connect("scripted disconnect".into())),
                MockReply::Text(text) => {
                    let (input_tokens, output_tokens) = self.usage.unwrap_or_else(|| {
                        let prompt_words: usize = request
                            .messages
                            .iter()
                            .map(|m| m.content.split_whitespace().count())
                            .sum();
                        (prompt_words as u64, text.split_whitespace().count() as u64)
                    });
                    return Ok(RawCompletion { text, input_tokens, output_tokens });
                }
            }
        }
    }
}

/// The user-turn text of a request (last user message).
pub fn user_text(request: &ChatRequest) -> &str {
    request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(|m| m.content.as_str())
        .unwrap_or("")
}
