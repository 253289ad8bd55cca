//! Uniform access to chat-completion and embedding endpoints.
//!
//! One trait, three backends: [`HttpGateway`] speaks the OpenAI-compatible
//! wire format, [`MockGateway`] answers from a scripted transcript keyed by
//! prompt fingerprint, and [`OfflineBackend`] synthesizes deterministic
//! replies for fully offline runs. All backends share the same audit log
//! machinery so callers can account for every request.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::util::normalize_ws;

mod http;
mod mock;
mod offline;

pub use http::HttpGateway;
pub use mock::MockGateway;
pub use offline::OfflineBackend;

/// Roles in a chat conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

/// A named tool invocation with JSON arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Value,
}

/// One wire message of a chat request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_calls: Option<Vec<ToolCall>>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
            tool_calls: None,
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
            tool_calls: None,
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            tool_calls: None,
        }
    }
    pub fn tool(content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_calls: None,
        }
    }
}

/// A chat-completion request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<Vec<Value>>,
    pub temperature: f32,
    pub max_turn_tokens: u32,
}

/// The first choice's message from a chat completion.
#[derive(Debug, Clone, Default)]
pub struct ChatReply {
    pub content: String,
    /// Structured tool calls when the provider returns them natively.
    pub tool_calls: Vec<ToolCall>,
}

/// Connection and retry settings for an HTTP backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_secs: f64,
    pub concurrency_limit: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".to_string(),
            api_key_env: "TOOLFORGE_API_KEY".to_string(),
            request_timeout_secs: 120,
            max_retries: 3,
            backoff_base_secs: 0.5,
            concurrency_limit: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },
    #[error("rate limited; {retries} retries exhausted")]
    RateLimited { retries: u32 },
    #[error("bad request (HTTP {status}): {message}")]
    BadRequest { status: u16, message: String },
    #[error("no scripted reply for prompt fingerprint {fingerprint}")]
    UnscriptedPrompt { fingerprint: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Fingerprint of a chat request: the role-tagged message list plus the
/// model id, with whitespace collapsed so incidental formatting in fixtures
/// does not change the key.
pub fn fingerprint(req: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(req.model.as_bytes());
    for msg in &req.messages {
        hasher.update([0x1e]);
        hasher.update(msg.role.as_str().as_bytes());
        hasher.update([0x1f]);
        hasher.update(normalize_ws(&msg.content).as_bytes());
        if let Some(calls) = &msg.tool_calls {
            hasher.update([0x1f]);
            hasher.update(serde_json::to_string(calls).unwrap_or_default().as_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// What a single gateway call was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Chat,
    Embed,
}

/// One recorded gateway call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub ts_ms: u64,
    pub kind: CallKind,
    pub model: String,
    pub fingerprint: String,
    pub latency_ms: u64,
    pub status: String,
    pub retries: u32,
}

/// Append-only record of every request a backend served, kept in memory and
/// optionally mirrored to a JSONL file.
#[derive(Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
    sink: Mutex<Option<std::io::BufWriter<std::fs::File>>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mirror subsequent entries to a JSONL file.
    pub fn attach_file(&self, path: &std::path::Path) -> std::io::Result<()> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        *self.sink.lock().unwrap() = Some(std::io::BufWriter::new(file));
        Ok(())
    }

    pub fn record(&self, entry: AuditEntry) {
        if let Some(sink) = self.sink.lock().unwrap().as_mut() {
            use std::io::Write;
            let _ = serde_json::to_writer(&mut *sink, &entry);
            let _ = sink.write_all(b"\n");
            let _ = sink.flush();
        }
        self.entries.lock().unwrap().push(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn chat_calls(&self) -> usize {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.kind == CallKind::Chat)
            .count()
    }

    pub fn embed_calls(&self) -> usize {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.kind == CallKind::Embed)
            .count()
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_millis() as u64
}

/// Chat-completion and embedding access shared by every pipeline stage.
pub trait ChatGateway: Send + Sync {
    /// Returns the first choice's message verbatim.
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, GatewayError>;

    /// One vector per input text, all of identical dimension, order preserved.
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;

    fn audit(&self) -> &AuditLog;
}

/// A gateway bound to one role's model and sampling settings.
#[derive(Clone)]
pub struct Agent {
    pub gateway: Arc<dyn ChatGateway>,
    pub model: String,
    pub temperature: f32,
    pub max_turn_tokens: u32,
}

impl Agent {
    pub fn new(gateway: Arc<dyn ChatGateway>, model: impl Into<String>) -> Self {
        Self {
            gateway,
            model: model.into(),
            temperature: 0.7,
            max_turn_tokens: 2048,
        }
    }

    pub fn request(&self, messages: Vec<ChatMessage>, tools: Option<Vec<Value>>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            tools,
            temperature: self.temperature,
            max_turn_tokens: self.max_turn_tokens,
        }
    }

    pub fn chat(
        &self,
        messages: Vec<ChatMessage>,
        tools: Option<Vec<Value>>,
    ) -> Result<ChatReply, GatewayError> {
        self.gateway.chat(&self.request(messages, tools))
    }
}

/// Result of a strict-format exchange: either a parsed value or the final
/// unparseable reply after all re-prompts.
#[derive(Debug)]
pub enum StrictOutcome<T> {
    Parsed {
        value: T,
        raw: String,
        attempts: u32,
    },
    FormatFailed {
        last_raw: String,
        attempts: u32,
    },
}

/// Runs a chat exchange whose reply must satisfy `parse`. On a format
/// failure the bad reply plus `reprompt` are appended and the exchange is
/// retried up to `retries` more times. Transport errors propagate.
pub fn chat_strict<T>(
    agent: &Agent,
    messages: Vec<ChatMessage>,
    tools: Option<Vec<Value>>,
    reprompt: &str,
    retries: u32,
    parse: impl Fn(&ChatReply) -> Option<T>,
) -> Result<StrictOutcome<T>, GatewayError> {
    let mut convo = messages;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = agent.chat(convo.clone(), tools.clone())?;
        if let Some(value) = parse(&reply) {
            return Ok(StrictOutcome::Parsed {
                value,
                raw: reply.content,
                attempts,
            });
        }
        if attempts > retries {
            return Ok(StrictOutcome::FormatFailed {
                last_raw: reply.content,
                attempts,
            });
        }
        convo.push(ChatMessage::assistant(reply.content));
        convo.push(ChatMessage::user(reprompt));
    }
}

/// Blocking counting semaphore bounding in-flight HTTP requests.
pub(crate) struct Semaphore {
    available: Mutex<usize>,
    cv: std::sync::Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            cv: std::sync::Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.cv.wait(available).unwrap();
        }
        *available -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub(crate) struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.available.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

/// Deterministic unit-norm pseudo-embedding of `text`, keyed by
/// `hash(text, seed)`. Identical inputs yield identical vectors in any
/// process, which makes graph fixtures reproducible by hand.
pub fn hash_embedding(text: &str, seed: u64, dim: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let rng_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

pub(crate) fn embed_fingerprint(model: &str, texts: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.as_bytes());
    for t in texts {
        hasher.update([0x1e]);
        hasher.update(t.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages,
            tools: None,
            temperature: 0.0,
            max_turn_tokens: 64,
        }
    }

    #[test]
    fn fingerprint_ignores_incidental_whitespace() {
        let a = req(vec![ChatMessage::user("hello   world")]);
        let b = req(vec![ChatMessage::user("hello world")]);
        assert_eq!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn fingerprint_distinguishes_roles_and_models() {
        let a = req(vec![ChatMessage::user("x")]);
        let b = req(vec![ChatMessage::system("x")]);
        assert_ne!(fingerprint(&a), fingerprint(&b));
        let mut c = req(vec![ChatMessage::user("x")]);
        c.model = "other".into();
        assert_ne!(fingerprint(&a), fingerprint(&c));
    }

    #[test]
    fn hash_embedding_is_unit_norm_and_seed_sensitive() {
        let a = hash_embedding("some text", 7, 64);
        let b = hash_embedding("some text", 7, 64);
        let c = hash_embedding("some text", 8, 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let sem = Arc::new(Semaphore::new(2));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let sem = sem.clone();
            let in_flight = in_flight.clone();
            let peak = peak.clone();
            handles.push(std::thread::spawn(move || {
                let _guard = sem.acquire();
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(std::time::Duration::from_millis(10));
                in_flight.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
