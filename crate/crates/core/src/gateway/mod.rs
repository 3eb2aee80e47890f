//! Uniform access to chat-completion and embedding providers.
//!
//! A [`Gateway`] wraps one [`Provider`] (an OpenAI-compatible HTTP endpoint
//! or the deterministic [`ScriptedProvider`]) and enforces the prompt
//! budget, the in-flight request limit, vector normalization, and a call log
//! that tests and pipeline traces read back.

mod http;
mod scripted;

pub use http::HttpProvider;
pub use scripted::{
    request_digest, seeded_hash_vector, EmbeddingMode, FixtureEntry, FixtureMatch, HashEmbedder, RecordingProvider,
    ScriptedProvider,
};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::count_tokens;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt needs {needed} tokens but only {available} fit in the context window")]
    BudgetExceeded { needed: usize, available: usize },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no fixture for request digest {digest}")]
    FixtureMiss { digest: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f32,
    pub max_output_tokens: usize,
    pub stream: bool,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages, temperature: 0.0, max_output_tokens: 512, stream: false }
    }

    pub fn temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn max_output_tokens(mut self, max_output_tokens: usize) -> Self {
        self.max_output_tokens = max_output_tokens;
        self
    }

    pub fn stream(mut self, stream: bool) -> Self {
        self.stream = stream;
        self
    }

    /// Engine-token total over all message contents.
    pub fn prompt_tokens(&self) -> usize {
        self.messages.iter().map(|m| count_tokens(&m.content)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        match self.messages.first() {
            None => return Err(GatewayError::InvalidRequest("messages must not be empty".into())),
            Some(m) if m.role == Role::Assistant => {
                return Err(GatewayError::InvalidRequest("first message must be a system or user message".into()))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0, 1]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

fn default_timeout_secs() -> f64 {
    120.0
}

fn default_max_retries() -> u32 {
    2
}

fn default_max_concurrency() -> usize {
    8
}

fn default_max_context_tokens() -> usize {
    32768
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Sent as a bearer token when present.
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_max_context_tokens")]
    pub max_context_tokens: usize,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    /// Passed through verbatim in every request body (e.g. `rope_scaling`).
    #[serde(default)]
    pub extra_params: serde_json::Map<String, serde_json::Value>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1".into(),
            model_name: "default".into(),
            api_key: None,
            max_context_tokens: default_max_context_tokens(),
            request_timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            max_concurrency: default_max_concurrency(),
            extra_params: Default::default(),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_context_tokens < 1024 {
            return Err(GatewayError::Config(format!(
                "max_context_tokens must be at least 1024, got {}",
                self.max_context_tokens
            )));
        }
        if self.max_retries > 10 {
            return Err(GatewayError::Config(format!("max_retries must be at most 10, got {}", self.max_retries)));
        }
        if self.max_concurrency == 0 {
            return Err(GatewayError::Config("max_concurrency must be positive".into()));
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            return Err(GatewayError::Config("request_timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }
}

/// A backend able to complete chats and embed text.
pub trait Provider: Send + Sync {
    /// Stable identity; embeddings are a pure function of (text, id).
    fn id(&self) -> &str;

    /// Completes `request`. Streaming providers push fragments into `sink`
    /// in order; the return value is always the full completion.
    fn complete(&self, request: &ChatRequest, sink: &mut dyn FnMut(&str)) -> Result<String>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Chat,
    Judge,
    Embed,
}

/// What a call was made for. Used for tracing and call-law assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    NerInit,
    NerContinue,
    NerJudge,
    Intent,
    Decompose,
    Plan,
    Filter,
    ArgumentJudge,
    ResultJudge,
    Generate,
    Embed,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    /// Process-wide sequence number; orders calls across scopes.
    pub seq: u64,
    pub kind: CallKind,
    pub purpose: Purpose,
    pub digest: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub ok: bool,
}

static CALL_SEQ: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub verdict: Verdict,
    pub raw_text: String,
}

impl JudgeVerdict {
    pub fn is_yes(&self) -> bool {
        self.verdict == Verdict::Yes
    }
}

pub const AFFIRMATIVES: &[&str] = &["yes", "y", "true", "是"];

/// Parses a judge completion: lowercase and trim, then affirmative iff the
/// leading token is one of `AFFIRMATIVES` or `extra`. Anything else is `No`.
pub fn parse_verdict(raw: &str, extra: &[&str]) -> Verdict {
    let lowered = raw.trim().to_lowercase();
    let first = crate::tokens::tokenize(&lowered).into_iter().next().unwrap_or("");
    if AFFIRMATIVES.contains(&first) || extra.contains(&first) {
        Verdict::Yes
    } else {
        Verdict::No
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self { in_flight: Mutex::new(0), freed: Condvar::new(), max: max.max(1) }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock();
        while *n >= self.max {
            self.freed.wait(&mut n);
        }
        *n += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock() -= 1;
        self.0.freed.notify_one();
    }
}

type CallLog = Arc<Mutex<Vec<CallRecord>>>;

/// Budget-enforcing, call-logging front end to a [`Provider`].
///
/// Cloning is cheap and shares the log. [`Gateway::scoped`] creates a view
/// with its own log that also forwards to every enclosing log, so a single
/// query can account for its own calls while sharing the provider.
#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn Provider>,
    config: Arc<ProviderConfig>,
    limiter: Arc<Limiter>,
    logs: Vec<CallLog>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.id())
            .field("endpoint_url", &self.config.endpoint_url)
            .field("model_name", &self.config.model_name)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, config: ProviderConfig) -> Result<Self> {
        config.validate()?;
        let limiter = Arc::new(Limiter::new(config.max_concurrency));
        Ok(Self { provider, config: Arc::new(config), limiter, logs: vec![Default::default()] })
    }

    /// Gateway over a scripted provider with a default 32k window.
    pub fn scripted(provider: ScriptedProvider) -> Self {
        Self::new(Arc::new(provider), ProviderConfig::default()).expect("default config is valid")
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn scoped(&self) -> Self {
        let mut logs = self.logs.clone();
        logs.push(Default::default());
        Self { logs, ..self.clone() }
    }

    /// Calls recorded by this scope, in call order.
    pub fn calls(&self) -> Vec<CallRecord> {
        self.logs.last().expect("at least one log").lock().clone()
    }

    fn record(&self, record: CallRecord) {
        for log in &self.logs {
            log.lock().push(record.clone());
        }
    }

    /// Prompt tokens available for `request` after reserving its output.
    pub fn prompt_budget(&self, max_output_tokens: usize) -> usize {
        self.config.max_context_tokens.saturating_sub(max_output_tokens)
    }

    pub fn chat(&self, purpose: Purpose, request: &ChatRequest, sink: Option<&mut dyn FnMut(&str)>) -> Result<String> {
        self.chat_as(CallKind::Chat, purpose, request, sink)
    }

    fn chat_as(
        &self,
        kind: CallKind,
        purpose: Purpose,
        request: &ChatRequest,
        sink: Option<&mut dyn FnMut(&str)>,
    ) -> Result<String> {
        request.validate()?;
        let needed = request.prompt_tokens();
        let available = self.prompt_budget(request.max_output_tokens);
        if needed > available {
            return Err(GatewayError::BudgetExceeded { needed, available });
        }
        let digest = request_digest(&request.messages);
        let mut discard = |_: &str| {};
        let sink: &mut dyn FnMut(&str) = match sink {
            Some(s) => s,
            None => &mut discard,
        };
        let result = {
            let _permit = self.limiter.acquire();
            self.provider.complete(request, sink)
        };
        self.record(CallRecord {
            seq: CALL_SEQ.fetch_add(1, Ordering::SeqCst),
            kind,
            purpose,
            digest,
            prompt_tokens: needed,
            completion_tokens: result.as_deref().map(count_tokens).unwrap_or(0),
            ok: result.is_ok(),
        });
        result
    }

    /// Single-prompt judge with the default affirmative set.
    pub fn judge(&self, prompt: &str) -> Result<JudgeVerdict> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("judge prompt must not be empty".into()));
        }
        self.judge_messages(Purpose::Other, vec![Message::user(prompt)], &[], 0.0)
    }

    /// Judge over an arbitrary conversation; `extra` extends the affirmative set.
    pub fn judge_messages(
        &self,
        purpose: Purpose,
        messages: Vec<Message>,
        extra: &[&str],
        temperature: f32,
    ) -> Result<JudgeVerdict> {
        let request = ChatRequest::new(messages).temperature(temperature).max_output_tokens(16);
        let raw_text = self.chat_as(CallKind::Judge, purpose, &request, None)?;
        Ok(JudgeVerdict { verdict: parse_verdict(&raw_text, extra), raw_text })
    }

    /// Embeds `texts` into L2-normalized vectors of one shared dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(GatewayError::InvalidRequest("embed needs non-empty texts".into()));
        }
        let result = {
            let _permit = self.limiter.acquire();
            self.provider.embed(texts)
        };
        self.record(CallRecord {
            seq: CALL_SEQ.fetch_add(1, Ordering::SeqCst),
            kind: CallKind::Embed,
            purpose: Purpose::Embed,
            digest: String::new(),
            prompt_tokens: texts.iter().map(|t| count_tokens(t)).sum(),
            completion_tokens: 0,
            ok: result.is_ok(),
        });
        let vectors = result?;
        if vectors.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(GatewayError::MalformedResponse("zero-length embedding".into()));
        }
        vectors
            .into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(GatewayError::DimensionMismatch { expected: dim, got: v.len() });
                }
                normalize(v)
            })
            .collect()
    }

    /// Per-purpose call counts of this scope.
    pub fn call_counts(&self) -> BTreeMap<Purpose, usize> {
        let mut counts = BTreeMap::new();
        for call in self.calls() {
            *counts.entry(call.purpose).or_default() += 1;
        }
        counts
    }
}

fn normalize(v: Vec<f32>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(GatewayError::MalformedResponse("embedding has zero or non-finite norm".into()));
    }
    Ok(v.into_iter().map(|x| (f64::from(x) / norm) as f32).collect())
}

/// Cosine of two unit vectors, accumulated sequentially in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}
