//! Text generation over interchangeable backends.
//!
//! A [`Gateway`] owns a set of named backends, applies per-backend retry and
//! in-flight limits, and optionally records every call in an ordered log.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::embedding::fnv1a;
use crate::prompt::{count_tokens, ReferenceTokenizer, Tokenizer};

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 1024;
pub const MOCK_PREAMBLE: &str = "Mock response";
pub const MOCK_ECHO_TOKENS: usize = 20;

pub const ENV_ENDPOINT: &str = "RCAKB_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "RCAKB_LLM_API_KEY";
pub const ENV_MODEL: &str = "RCAKB_LLM_MODEL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("no backend registered under `{0}`")]
    NoBackend(String),
    #[error("backend timed out after {attempts} attempt(s)")]
    BackendTimeout { attempts: u32 },
    #[error("backend refused the request with status {status}: {body}")]
    BackendRefused { status: u16, body: String },
    #[error("backend transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("scripted backend has no response for prompt `{0}`")]
    UnmappedPrompt(String),
    #[error("call tracing is disabled")]
    TracingDisabled,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

impl GatewayError {
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::BackendTimeout { .. } | GatewayError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt_text: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub backend_tag: String,
    /// Free-form label carried into the call log, typically the ticket id.
    #[serde(default)]
    pub trace_tag: String,
}

impl GenerationRequest {
    pub fn new(prompt_text: impl Into<String>, backend_tag: impl Into<String>) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: 0.0,
            stop_sequences: Vec::new(),
            backend_tag: backend_tag.into(),
            trace_tag: String::new(),
        }
    }

    pub fn with_trace_tag(mut self, tag: impl Into<String>) -> Self {
        self.trace_tag = tag.into();
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt_text is empty".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_token_count: u64,
    pub completion_token_count: u64,
    pub latency_ms: u64,
    pub backend_tag: String,
}

/// What a backend returns from a single attempt. Token counts the backend
/// does not report are filled in by the gateway.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

pub trait Backend: Send + Sync {
    /// One attempt, no retries. Timeouts and transport failures are retried by
    /// the gateway; every other error is final.
    fn attempt(&self, request: &GenerationRequest) -> Result<Completion, GatewayError>;

    /// Stable identity for run manifests.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Scripted,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "scripted" => Ok(BackendKind::Scripted),
            "http" => Ok(BackendKind::Http),
            other => Err(GatewayError::InvalidConfig(format!("unknown backend kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// Fixture file for the scripted backend.
    pub fixture: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: "default".into(),
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 4,
            fixture: None,
            api_key: None,
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            model: model.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if self.kind == BackendKind::Http && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(GatewayError::InvalidConfig("http backend needs an endpoint".into()));
        }
        if self.kind == BackendKind::Http && self.timeout_ms == 0 {
            return Err(GatewayError::InvalidConfig("timeout_ms must be positive".into()));
        }
        Ok(())
    }

    /// Fills endpoint, credential and model from the environment where set.
    pub fn apply_env(&mut self) {
        self.apply_vars(|k| std::env::var(k).ok());
    }

    pub fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(ENV_ENDPOINT).filter(|v| !v.is_empty()) {
            self.endpoint = Some(v);
        }
        if let Some(v) = get(ENV_API_KEY).filter(|v| !v.is_empty()) {
            self.api_key = Some(v);
        }
        if let Some(v) = get(ENV_MODEL).filter(|v| !v.is_empty()) {
            self.model = v;
        }
    }

    /// Builds the backend this config describes.
    pub fn build(&self) -> Result<Arc<dyn Backend>, GatewayError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Arc::new(MockBackend),
            BackendKind::Scripted => {
                let path = self
                    .fixture
                    .as_deref()
                    .ok_or_else(|| GatewayError::InvalidConfig("scripted backend needs a fixture".into()))?;
                Arc::new(ScriptedBackend::load(path)?)
            }
            BackendKind::Http => Arc::new(HttpBackend::new(self.clone(), Box::new(ChatCompletionsAdapter))?),
        })
    }
}

/// Deterministic, prompt-sensitive stand-in for a model.
///
/// Output is a fixed preamble, a digest of the whole prompt and the prompt's
/// last [`MOCK_ECHO_TOKENS`] tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

pub fn mock_output(prompt_text: &str) -> String {
    let tokens = ReferenceTokenizer.tokenize(prompt_text);
    let tail = &tokens[tokens.len().saturating_sub(MOCK_ECHO_TOKENS)..];
    format!(
        "{MOCK_PREAMBLE} {:016x}: {}",
        fnv1a(prompt_text.as_bytes()),
        ReferenceTokenizer.detokenize(tail)
    )
}

impl Backend for MockBackend {
    fn attempt(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        Ok(Completion::text(mock_output(&request.prompt_text)))
    }

    fn fingerprint(&self) -> String {
        format!("mock-v1:{MOCK_ECHO_TOKENS}")
    }
}

/// Replays fixed responses keyed by exact prompt text.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    responses: HashMap<String, String>,
    fallback: Option<String>,
}

impl ScriptedBackend {
    pub fn new(responses: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            responses: responses.into_iter().collect(),
            fallback: None,
        }
    }

    /// Response used for any prompt without an exact entry.
    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    pub fn insert(&mut self, prompt: impl Into<String>, response: impl Into<String>) {
        self.responses.insert(prompt.into(), response.into());
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Fixture file: `{"responses": {prompt: text, ...}, "fallback": text?}`.
    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let fixture: ScriptFixture =
            serde_json::from_str(text).map_err(|e| GatewayError::Fixture(e.to_string()))?;
        Ok(Self {
            responses: fixture.responses.into_iter().collect(),
            fallback: fixture.fallback,
        })
    }

    pub fn to_json(&self) -> String {
        let fixture = ScriptFixture {
            responses: self.responses.clone().into_iter().collect(),
            fallback: self.fallback.clone(),
        };
        serde_json::to_string_pretty(&fixture).expect("fixture serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ScriptFixture {
    responses: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fallback: Option<String>,
}

fn preview(text: &str) -> String {
    const MAX: usize = 80;
    match text.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &text[..i]),
        None => text.to_string(),
    }
}

impl Backend for ScriptedBackend {
    fn attempt(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        self.responses
            .get(&request.prompt_text)
            .or(self.fallback.as_ref())
            .map(|t| Completion::text(t.clone()))
            .ok_or_else(|| GatewayError::UnmappedPrompt(preview(&request.prompt_text)))
    }

    fn fingerprint(&self) -> String {
        let mut keys: Vec<(&String, &String)> = self.responses.iter().collect();
        keys.sort();
        let mut h = Vec::new();
        for (k, v) in keys {
            h.extend_from_slice(k.as_bytes());
            h.push(0);
            h.extend_from_slice(v.as_bytes());
            h.push(0);
        }
        if let Some(f) = &self.fallback {
            h.extend_from_slice(f.as_bytes());
        }
        format!("scripted-v1:{}:{:016x}", self.responses.len(), fnv1a(&h))
    }
}

/// Maps between requests and one vendor's wire format.
pub trait WireAdapter: Send + Sync {
    fn request_body(&self, request: &GenerationRequest, model: &str) -> Value;

    fn parse_response(&self, body: &Value) -> Result<Completion, GatewayError>;

    fn name(&self) -> &str;
}

/// The common chat-completions shape: one user message in, first choice out.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChatCompletionsAdapter;

impl WireAdapter for ChatCompletionsAdapter {
    fn request_body(&self, request: &GenerationRequest, model: &str) -> Value {
        let mut body = json!({
            "model": model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        body
    }

    fn parse_response(&self, body: &Value) -> Result<Completion, GatewayError> {
        let choice = body
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| GatewayError::MalformedResponse("no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .or_else(|| choice.get("text"))
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::MalformedResponse("first choice has no text".into()))?;
        let usage = |k: &str| body.get("usage").and_then(|u| u.get(k)).and_then(Value::as_u64);
        Ok(Completion {
            text: text.to_string(),
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
        })
    }

    fn name(&self) -> &str {
        "chat-completions"
    }
}

pub struct HttpBackend {
    config: BackendConfig,
    adapter: Box<dyn WireAdapter>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: BackendConfig, adapter: Box<dyn WireAdapter>) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(Self { config, adapter, client })
    }
}

impl Backend for HttpBackend {
    fn attempt(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let mut call = self
            .client
            .post(endpoint)
            .json(&self.adapter.request_body(request, &self.config.model));
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| transport_error(&e))?;
        let status = response.status();
        let body = response.text().map_err(|e| transport_error(&e))?;
        if !status.is_success() {
            return Err(GatewayError::BackendRefused {
                status: status.as_u16(),
                body: preview(&body),
            });
        }
        let value: Value =
            serde_json::from_str(&body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        self.adapter.parse_response(&value)
    }

    fn fingerprint(&self) -> String {
        format!(
            "http-v1:{}:{}:{}",
            self.adapter.name(),
            self.config.endpoint.as_deref().unwrap_or_default(),
            self.config.model
        )
    }
}

fn transport_error(e: &reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::BackendTimeout { attempts: 1 }
    } else {
        GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallOutcome {
    Response(GenerationResponse),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_id: u64,
    pub request: GenerationRequest,
    pub outcome: CallOutcome,
    pub attempts: u32,
}

impl CallRecord {
    pub fn is_ok(&self) -> bool {
        matches!(self.outcome, CallOutcome::Response(_))
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct Limiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max,
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

struct Slot {
    backend: Arc<dyn Backend>,
    retries: u32,
    limiter: Limiter,
}

/// Routes requests to named backends. Shareable across threads.
pub struct Gateway {
    slots: HashMap<String, Slot>,
    tracing: bool,
    log: Mutex<Vec<CallRecord>>,
    next_id: AtomicU64,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new(true)
    }
}

impl Gateway {
    pub fn new(tracing: bool) -> Self {
        Self {
            slots: HashMap::new(),
            tracing,
            log: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
        }
    }

    /// A traced gateway with a single backend.
    pub fn single(tag: &str, backend: Arc<dyn Backend>) -> Self {
        let mut g = Self::new(true);
        g.register(tag, backend, 0, 1);
        g
    }

    pub fn register(&mut self, tag: &str, backend: Arc<dyn Backend>, retries: u32, max_in_flight: usize) {
        self.slots.insert(
            tag.to_string(),
            Slot {
                backend,
                retries,
                limiter: Limiter::new(max_in_flight.max(1)),
            },
        );
    }

    pub fn register_config(&mut self, tag: &str, config: &BackendConfig) -> Result<(), GatewayError> {
        let backend = config.build()?;
        self.register(tag, backend, config.retries, config.max_in_flight);
        Ok(())
    }

    pub fn has_backend(&self, tag: &str) -> bool {
        self.slots.contains_key(tag)
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        self.slots
            .iter()
            .map(|(tag, s)| (tag.clone(), s.backend.fingerprint()))
            .collect()
    }

    pub fn tracing_enabled(&self) -> bool {
        self.tracing
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let slot = self
            .slots
            .get(&request.backend_tag)
            .ok_or_else(|| GatewayError::NoBackend(request.backend_tag.clone()))?;
        request.validate()?;
        let started = Instant::now();
        let mut attempts = 0u32;
        let result = loop {
            attempts += 1;
            let outcome = {
                let _permit = slot.limiter.acquire();
                slot.backend.attempt(request)
            };
            match outcome {
                Err(e) if e.retryable() && attempts <= slot.retries => {
                    tracing::warn!(attempt = attempts, error = %e, "retrying generation");
                }
                Err(GatewayError::BackendTimeout { .. }) => break Err(GatewayError::BackendTimeout { attempts }),
                Err(GatewayError::Transport { message, .. }) => {
                    break Err(GatewayError::Transport { attempts, message })
                }
                other => break other,
            }
        };
        let result = result.map(|c| {
            let completion_tokens = c.completion_tokens.unwrap_or_else(|| count_tokens(&c.text) as u64);
            GenerationResponse {
                prompt_token_count: c
                    .prompt_tokens
                    .unwrap_or_else(|| count_tokens(&request.prompt_text) as u64),
                completion_token_count: completion_tokens,
                text: c.text,
                latency_ms: started.elapsed().as_millis() as u64,
                backend_tag: request.backend_tag.clone(),
            }
        });
        if self.tracing {
            let mut log = self.log.lock().expect("call log poisoned");
            log.push(CallRecord {
                call_id: self.next_id.fetch_add(1, Ordering::SeqCst),
                request: request.clone(),
                outcome: match &result {
                    Ok(r) => CallOutcome::Response(r.clone()),
                    Err(e) => CallOutcome::Error(e.to_string()),
                },
                attempts,
            });
        }
        result
    }

    /// Every call so far in issuance order.
    pub fn call_log(&self) -> Result<Vec<CallRecord>, GatewayError> {
        if !self.tracing {
            return Err(GatewayError::TracingDisabled);
        }
        Ok(self.log.lock().expect("call log poisoned").clone())
    }

    /// Calls carrying `trace_tag`, in issuance order.
    pub fn calls_for(&self, trace_tag: &str) -> Result<Vec<CallRecord>, GatewayError> {
        Ok(self
            .call_log()?
            .into_iter()
            .filter(|c| c.request.trace_tag == trace_tag)
            .collect())
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("call log poisoned").clear();
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backends", &self.fingerprints())
            .field("tracing", &self.tracing)
            .finish()
    }
}

/// Writes a scripted fixture to disk.
pub fn write_fixture(path: impl AsRef<Path>, backend: &ScriptedBackend) -> io::Result<()> {
    crate::util::write_atomically(path.as_ref(), backend.to_json().as_bytes())
}
