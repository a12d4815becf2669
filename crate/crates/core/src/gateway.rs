//! Uniform chat-completion access over remote endpoints, scripted mocks and
//! recorded cassettes.
//!
//! Every [`Gateway::complete`] call charges exactly one [`CostLedger`] entry
//! and appends one [`TranscriptEntry`] to the caller's [`Session`], whether
//! the call succeeded or not.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::costing::{estimate_tokens, Charge, CostBasis, CostLedger, Dollars, Role, UsageSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingProfile {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub max_output_tokens: u32,
}

impl SamplingProfile {
    /// Near-deterministic decoding for the student.
    pub const STUDENT: SamplingProfile = SamplingProfile {
        temperature: 0.2,
        top_p: 0.1,
        top_k: 1,
        max_output_tokens: 500,
    };

    /// Exploratory decoding for the teacher.
    pub const TEACHER: SamplingProfile = SamplingProfile {
        temperature: 1.9,
        top_p: 0.9,
        top_k: 50,
        max_output_tokens: 500,
    };

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err("top_p must be in (0, 1]".into());
        }
        if self.top_k < 1 {
            return Err("top_k must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend_ref: String,
    pub messages: Vec<ChatMessage>,
    pub profile: SamplingProfile,
}

impl ChatRequest {
    pub fn new(backend_ref: impl Into<String>, messages: Vec<ChatMessage>, profile: SamplingProfile) -> Self {
        Self {
            backend_ref: backend_ref.into(),
            messages,
            profile,
        }
    }

    /// Backend name: the part of `backend_ref` before any `+ftN` suffix.
    pub fn backend_name(&self) -> &str {
        base_backend(&self.backend_ref)
    }

    /// Stable SHA-256 over the canonical JSON of the request.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        let mut canonical = String::new();
        write_canonical(&value, &mut canonical);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn base_backend(backend_ref: &str) -> &str {
    backend_ref.split('+').next().unwrap_or(backend_ref)
}

/// JSON with object keys sorted at every level; string contents untouched.
fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("key serializes"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    pub elapsed_seconds: f64,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            usage: None,
            elapsed_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Timeout,
    Connection,
    RateLimited,
    Server,
    BadRequest,
    Status,
    ReplayMiss,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?}{}: {message}", status.map(|s| format!(" ({s})")).unwrap_or_default())]
pub struct BackendError {
    pub kind: FailureKind,
    pub status: Option<u16>,
    pub message: String,
}

impl BackendError {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            status: None,
            message: message.into(),
        }
    }

    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        let kind = match status {
            408 => FailureKind::Timeout,
            429 => FailureKind::RateLimited,
            500..=599 => FailureKind::Server,
            400 | 422 => FailureKind::BadRequest,
            _ => FailureKind::Status,
        };
        Self {
            kind,
            status: Some(status),
            message: message.into(),
        }
    }

    /// Timeouts, connection failures, 429 and 5xx are retried.
    pub fn is_transient(&self) -> bool {
        matches!(
            self.kind,
            FailureKind::Timeout | FailureKind::Connection | FailureKind::RateLimited | FailureKind::Server
        )
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay miss: no cassette entry for fingerprint {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("backend `{backend}` failed after {attempts} attempt(s): {error}")]
    Backend {
        backend: String,
        attempts: u32,
        error: BackendError,
    },
}

impl GatewayError {
    /// Errors that no amount of retrying or skipping can fix within a run.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            GatewayError::UnknownBackend(_) | GatewayError::InvalidRequest(_) | GatewayError::ReplayMiss { .. }
        )
    }
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, BackendError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self(request)
    }
}

type Script = Box<dyn Fn(&ChatRequest, u64) -> Result<ChatResponse, BackendError> + Send + Sync>;

/// Mock that replies from a closure and counts calls.
pub struct ScriptedBackend {
    script: Script,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&ChatRequest, u64) -> Result<ChatResponse, BackendError> + Send + Sync + 'static,
    {
        Self {
            script: Box::new(script),
            calls: AtomicU64::new(0),
        }
    }

    /// Always answers `content`.
    pub fn constant(content: impl Into<String>) -> Self {
        let content = content.into();
        Self::new(move |_, _| Ok(ChatResponse::text(content.clone())))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(request, n)
    }
}

/// Mock that pops scripted replies in order; an exhausted queue is an error.
#[derive(Default)]
pub struct QueueBackend {
    replies: Mutex<VecDeque<Result<ChatResponse, BackendError>>>,
    calls: AtomicU64,
}

impl QueueBackend {
    pub fn new<I>(replies: I) -> Self
    where
        I: IntoIterator<Item = Result<ChatResponse, BackendError>>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            calls: AtomicU64::new(0),
        }
    }

    pub fn texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(texts.into_iter().map(|t| Ok(ChatResponse::text(t))))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("queue lock").len()
    }
}

impl ChatBackend for QueueBackend {
    fn send(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies
            .lock()
            .expect("queue lock")
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::new(FailureKind::Other, "scripted replies exhausted")))
    }
}

/// OpenAI-style `POST {base_url}/v1/chat/completions` client.
pub struct RemoteBackend {
    name: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    supports_top_k: bool,
    warned_top_k: AtomicBool,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(
        name: impl Into<String>,
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        supports_top_k: bool,
        timeout: Duration,
    ) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            name: name.into(),
            endpoint: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            supports_top_k,
            warned_top_k: AtomicBool::new(false),
            client,
        })
    }

    /// Wire model name: configured model plus any fine-tune suffix of the ref.
    fn wire_model(&self, backend_ref: &str) -> String {
        match backend_ref.find('+') {
            Some(pos) => format!("{}{}", self.model, &backend_ref[pos..]),
            None => self.model.clone(),
        }
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = serde_json::json!({
            "model": self.wire_model(&request.backend_ref),
            "messages": messages,
            "temperature": request.profile.temperature,
            "top_p": request.profile.top_p,
            "max_tokens": request.profile.max_output_tokens,
        });
        if self.supports_top_k {
            body["top_k"] = Value::from(request.profile.top_k);
        } else if !self.warned_top_k.swap(true, Ordering::SeqCst) {
            tracing::warn!(backend = %self.name, "backend does not advertise top_k; dropping it");
        }
        body
    }
}

impl ChatBackend for RemoteBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut call = self.client.post(&self.endpoint).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| {
            let kind = if e.is_timeout() {
                FailureKind::Timeout
            } else if e.is_connect() || e.is_request() {
                FailureKind::Connection
            } else {
                FailureKind::Other
            };
            BackendError::new(kind, e.to_string())
        })?;
        let status = response.status().as_u16();
        let body = response
            .text()
            .map_err(|e| BackendError::new(FailureKind::Connection, e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(status, body));
        }
        let json: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::new(FailureKind::Other, format!("invalid response body: {e}")))?;
        let content = json
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::new(FailureKind::Other, "response has no choices[0].message.content"))?
            .to_string();
        let usage = match (
            json.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
            json.pointer("/usage/completion_tokens").and_then(Value::as_u64),
        ) {
            (Some(input_tokens), Some(output_tokens)) => Some(Usage {
                input_tokens,
                output_tokens,
            }),
            _ => None,
        };
        Ok(ChatResponse {
            content,
            usage,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_base_seconds: f64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff_base_seconds: 1.0,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let secs = self.backoff_base_seconds * self.backoff_factor.powi(retry.saturating_sub(1) as i32);
        Duration::from_secs_f64(secs.max(0.0))
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Runs `op` until it succeeds, fails non-transiently, or runs out of
/// attempts. Returns the outcome and the number of attempts made.
pub fn with_retry<T, F>(policy: &RetryPolicy, sleep: &dyn Fn(Duration), mut op: F) -> (Result<T, BackendError>, u32)
where
    F: FnMut() -> Result<T, BackendError>,
{
    let attempts = policy.attempts.max(1);
    let mut made = 0;
    loop {
        made += 1;
        match op() {
            Ok(v) => return (Ok(v), made),
            Err(e) if e.is_transient() && made < attempts => {
                tracing::debug!(attempt = made, error = %e, "transient failure, retrying");
                sleep(policy.delay(made));
            }
            Err(e) => return (Err(e), made),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub backend_ref: String,
    pub response: ChatResponse,
}

/// Recorded exchanges, consumed in order per fingerprint on replay.
#[derive(Debug, Default)]
pub struct Cassette {
    recorded: Mutex<Vec<CassetteEntry>>,
    queues: Mutex<HashMap<String, VecDeque<ChatResponse>>>,
}

impl Cassette {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<CassetteEntry>) -> Self {
        let mut queues: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        for e in &entries {
            queues
                .entry(e.fingerprint.clone())
                .or_default()
                .push_back(e.response.clone());
        }
        Self {
            recorded: Mutex::new(entries),
            queues: Mutex::new(queues),
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let file = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn record(&self, entry: CassetteEntry) {
        self.recorded.lock().expect("cassette lock").push(entry);
    }

    pub fn take(&self, fingerprint: &str) -> Option<ChatResponse> {
        self.queues
            .lock()
            .expect("cassette lock")
            .get_mut(fingerprint)
            .and_then(VecDeque::pop_front)
    }

    /// Marks already-consumed exchanges (e.g. from a checkpoint) as used.
    pub fn skip<'a, I: IntoIterator<Item = &'a str>>(&self, fingerprints: I) {
        let mut queues = self.queues.lock().expect("cassette lock");
        for fp in fingerprints {
            if let Some(q) = queues.get_mut(fp) {
                q.pop_front();
            }
        }
    }

    pub fn entries(&self) -> Vec<CassetteEntry> {
        self.recorded.lock().expect("cassette lock").clone()
    }

    pub fn len(&self) -> usize {
        self.recorded.lock().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(self.to_jsonl().as_bytes())?;
        file.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub role: Role,
    pub backend_ref: String,
    pub fingerprint: String,
    pub messages: Vec<ChatMessage>,
    pub profile: SamplingProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub usage_source: UsageSource,
    pub elapsed_seconds: f64,
    pub attempts: u32,
    pub dollars: Dollars,
}

/// Ordered log of every exchange in one run.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    entries: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        Self {
            entries: Arc::new(Mutex::new(entries)),
        }
    }

    fn push(&self, mut entry: TranscriptEntry) {
        let mut entries = self.entries.lock().expect("transcript lock");
        entry.seq = entries.len() as u64 + 1;
        entries.push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Per-run accounting context passed to every call.
#[derive(Debug, Clone, Default)]
pub struct Session {
    pub ledger: CostLedger,
    pub transcript: Transcript,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("semaphore lock");
        }
        *permits -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    Live,
    ReplayOnly,
}

struct BackendSlot {
    backend: Option<Arc<dyn ChatBackend>>,
    kind: SlotKind,
    cost: CostBasis,
    limiter: Semaphore,
}

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Clone)]
enum Mode {
    Live,
    Record(Arc<Cassette>),
    Replay(Arc<Cassette>),
}

impl fmt::Debug for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Live => "live",
            Mode::Record(_) => "record",
            Mode::Replay(_) => "replay",
        })
    }
}

pub struct GatewayBuilder {
    slots: BTreeMap<String, BackendSlot>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    mode: Mode,
    replay_source: Option<Arc<Cassette>>,
}

impl GatewayBuilder {
    pub fn backend(self, name: impl Into<String>, backend: Arc<dyn ChatBackend>, cost: CostBasis) -> Self {
        self.backend_with_parallelism(name, backend, cost, DEFAULT_PARALLELISM)
    }

    pub fn backend_with_parallelism(
        mut self,
        name: impl Into<String>,
        backend: Arc<dyn ChatBackend>,
        cost: CostBasis,
        parallelism: usize,
    ) -> Self {
        self.slots.insert(
            name.into(),
            BackendSlot {
                backend: Some(backend),
                kind: SlotKind::Live,
                cost,
                limiter: Semaphore::new(parallelism),
            },
        );
        self
    }

    /// A backend that is only ever served from the replay cassette.
    pub fn replay_backend(mut self, name: impl Into<String>, cost: CostBasis) -> Self {
        self.slots.insert(
            name.into(),
            BackendSlot {
                backend: None,
                kind: SlotKind::ReplayOnly,
                cost,
                limiter: Semaphore::new(DEFAULT_PARALLELISM),
            },
        );
        self
    }

    pub fn retry(mut self, policy: RetryPolicy) -> Self {
        self.retry = policy;
        self
    }

    pub fn sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// Record every live exchange into `cassette`.
    pub fn record(mut self, cassette: Arc<Cassette>) -> Self {
        self.mode = Mode::Record(cassette);
        self
    }

    /// Serve every backend from `cassette`; no backend is contacted.
    pub fn replay(mut self, cassette: Arc<Cassette>) -> Self {
        self.replay_source = Some(cassette.clone());
        self.mode = Mode::Replay(cassette);
        self
    }

    /// Cassette used by replay-only backends while other backends stay live.
    pub fn replay_source(mut self, cassette: Arc<Cassette>) -> Self {
        self.replay_source = Some(cassette);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            slots: self.slots,
            retry: self.retry,
            sleeper: self.sleeper,
            mode: self.mode,
            replay_source: self.replay_source,
        }
    }
}

pub struct Gateway {
    slots: BTreeMap<String, BackendSlot>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    mode: Mode,
    replay_source: Option<Arc<Cassette>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backends", &self.slots.keys().collect::<Vec<_>>())
            .field("retry", &self.retry)
            .field("mode", &self.mode)
            .finish()
    }
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder {
            slots: BTreeMap::new(),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            mode: Mode::Live,
            replay_source: None,
        }
    }

    pub fn has_backend(&self, name: &str) -> bool {
        self.slots.contains_key(base_backend(name))
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub fn cassette(&self) -> Option<Arc<Cassette>> {
        match &self.mode {
            Mode::Record(c) | Mode::Replay(c) => Some(c.clone()),
            Mode::Live => self.replay_source.clone(),
        }
    }

    /// Advances replay cursors past exchanges already present in a resumed
    /// transcript.
    pub fn skip_replayed(&self, transcript: &[TranscriptEntry]) {
        if let Some(cassette) = &self.replay_source {
            let replayed = transcript.iter().filter(|e| {
                matches!(self.mode, Mode::Replay(_))
                    || self
                        .slots
                        .get(base_backend(&e.backend_ref))
                        .is_some_and(|s| s.kind == SlotKind::ReplayOnly)
            });
            cassette.skip(replayed.filter(|e| e.error.is_none()).map(|e| e.fingerprint.as_str()));
        }
    }

    pub fn complete(&self, session: &Session, role: Role, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.complete_with(session, role, request, &self.retry)
    }

    pub fn complete_with(
        &self,
        session: &Session,
        role: Role,
        request: &ChatRequest,
        policy: &RetryPolicy,
    ) -> Result<ChatResponse, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        let name = request.backend_name();
        let slot = self
            .slots
            .get(name)
            .ok_or_else(|| GatewayError::UnknownBackend(name.to_string()))?;
        let fingerprint = request.fingerprint();

        let replay_from = match (&self.mode, slot.kind) {
            (Mode::Replay(c), _) => Some(c.clone()),
            (_, SlotKind::ReplayOnly) => self.replay_source.clone(),
            _ => None,
        };

        let (outcome, attempts) = if let Some(cassette) = replay_from {
            match cassette.take(&fingerprint) {
                Some(resp) => (Ok(resp), 1),
                None => {
                    let err = GatewayError::ReplayMiss {
                        fingerprint: fingerprint.clone(),
                    };
                    self.log(session, role, request, &fingerprint, Err(&err.to_string()), 1, slot);
                    return Err(err);
                }
            }
        } else {
            let backend = slot.backend.as_ref().expect("live slot has backend");
            let _permit = slot.limiter.acquire();
            with_retry(policy, self.sleeper.as_ref(), || backend.send(request))
        };

        match outcome {
            Ok(resp) => {
                if let Mode::Record(cassette) = &self.mode {
                    cassette.record(CassetteEntry {
                        fingerprint: fingerprint.clone(),
                        backend_ref: request.backend_ref.clone(),
                        response: resp.clone(),
                    });
                }
                self.log(session, role, request, &fingerprint, Ok(&resp), attempts, slot);
                Ok(resp)
            }
            Err(error) => {
                self.log(session, role, request, &fingerprint, Err(&error.to_string()), attempts, slot);
                Err(GatewayError::Backend {
                    backend: name.to_string(),
                    attempts,
                    error,
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn log(
        &self,
        session: &Session,
        role: Role,
        request: &ChatRequest,
        fingerprint: &str,
        outcome: Result<&ChatResponse, &str>,
        attempts: u32,
        slot: &BackendSlot,
    ) {
        let (input_tokens, output_tokens, source, elapsed) = match outcome {
            Ok(resp) => match resp.usage {
                Some(u) => (u.input_tokens, u.output_tokens, UsageSource::Reported, resp.elapsed_seconds),
                None => (
                    estimate_tokens(&request.prompt_text()),
                    estimate_tokens(&resp.content),
                    UsageSource::Estimated,
                    resp.elapsed_seconds,
                ),
            },
            Err(_) => (estimate_tokens(&request.prompt_text()), 0, UsageSource::Estimated, 0.0),
        };
        let dollars = slot.cost.charge(input_tokens, output_tokens, elapsed);
        session.ledger.append(Charge {
            role,
            backend: request.backend_ref.clone(),
            input_tokens,
            output_tokens,
            elapsed_seconds: elapsed,
            dollars,
            source,
        });
        session.transcript.push(TranscriptEntry {
            seq: 0,
            role,
            backend_ref: request.backend_ref.clone(),
            fingerprint: fingerprint.to_string(),
            messages: request.messages.clone(),
            profile: request.profile,
            content: outcome.ok().map(|r| r.content.clone()),
            error: outcome.err().map(str::to_string),
            input_tokens,
            output_tokens,
            usage_source: source,
            elapsed_seconds: elapsed,
            attempts,
            dollars,
        });
    }
}

pub fn save_transcript(transcript: &Transcript, path: &Path) -> std::io::Result<()> {
    fs::write(path, transcript.to_jsonl())
}
