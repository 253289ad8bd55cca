//! OpenAI-compatible HTTP backend: `/chat/completions` and `/embeddings`.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    embed_fingerprint, fingerprint, AuditEntry, AuditLog, CallKind, ChatGateway, ChatMessage,
    ChatReply, ChatRequest, GatewayConfig, GatewayError, Role, Semaphore, ToolCall,
};

pub struct HttpGateway {
    config: GatewayConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    semaphore: Semaphore,
    audit: AuditLog,
}

impl HttpGateway {
    pub fn new(config: GatewayConfig) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .expect("http client");
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            std::env::var(&config.api_key_env)
                .ok()
                .filter(|k| !k.is_empty())
        };
        let semaphore = Semaphore::new(config.concurrency_limit);
        Self {
            config,
            client,
            api_key,
            semaphore,
            audit: AuditLog::new(),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<(Value, u32), GatewayError> {
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let mut attempt = 0u32;
        loop {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let (rate_limited, failure) = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let value = resp.json::<Value>().map_err(|e| GatewayError::Transport {
                            message: format!("invalid JSON body: {e}"),
                            retries: attempt,
                        })?;
                        return Ok((value, attempt));
                    }
                    let code = status.as_u16();
                    if code != 429 && (400..500).contains(&code) {
                        let message = resp.text().unwrap_or_default();
                        return Err(GatewayError::BadRequest {
                            status: code,
                            message,
                        });
                    }
                    (code == 429, format!("HTTP {code}"))
                }
                Err(e) => (false, e.to_string()),
            };
            if attempt >= self.config.max_retries {
                return Err(if rate_limited {
                    GatewayError::RateLimited { retries: attempt }
                } else {
                    GatewayError::Transport {
                        message: failure,
                        retries: attempt,
                    }
                });
            }
            let backoff = self.config.backoff_base_secs * f64::powi(2.0, attempt as i32);
            std::thread::sleep(Duration::from_secs_f64(backoff));
            attempt += 1;
        }
    }

    fn record(
        &self,
        kind: CallKind,
        model: &str,
        fp: String,
        start: Instant,
        status: &str,
        retries: u32,
    ) {
        self.audit.record(AuditEntry {
            ts_ms: super::now_ms(),
            kind,
            model: model.to_string(),
            fingerprint: fp,
            latency_ms: start.elapsed().as_millis() as u64,
            status: status.to_string(),
            retries,
        });
    }
}

/// Renders messages in the OpenAI wire shape. Assistant tool calls get
/// sequential synthetic ids and tool messages consume them in FIFO order so
/// the id pairing matches the conversation structure.
fn wire_messages(messages: &[ChatMessage]) -> Vec<Value> {
    let mut next_id = 0usize;
    let mut pending_ids: std::collections::VecDeque<String> = std::collections::VecDeque::new();
    messages
        .iter()
        .map(|m| match m.role {
            Role::Assistant => {
                let mut obj = json!({"role": "assistant", "content": m.content});
                if let Some(calls) = &m.tool_calls {
                    if !calls.is_empty() {
                        let rendered: Vec<Value> = calls
                            .iter()
                            .map(|c| {
                                let id = format!("call_{next_id:04}");
                                next_id += 1;
                                pending_ids.push_back(id.clone());
                                json!({
                                    "id": id,
                                    "type": "function",
                                    "function": {
                                        "name": c.name,
                                        "arguments": serde_json::to_string(&c.arguments)
                                            .unwrap_or_else(|_| "{}".to_string()),
                                    }
                                })
                            })
                            .collect();
                        obj["tool_calls"] = Value::Array(rendered);
                    }
                }
                obj
            }
            Role::Tool => {
                let mut obj = json!({"role": "tool", "content": m.content});
                if let Some(id) = pending_ids.pop_front() {
                    obj["tool_call_id"] = Value::String(id);
                }
                obj
            }
            role => json!({"role": role.as_str(), "content": m.content}),
        })
        .collect()
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    tool_calls: Option<Vec<WireToolCall>>,
}

#[derive(Deserialize)]
struct WireToolCall {
    function: WireFunction,
}

#[derive(Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: String,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    index: usize,
    embedding: Vec<f64>,
}

impl ChatGateway for HttpGateway {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let _permit = self.semaphore.acquire();
        let start = Instant::now();
        let fp = fingerprint(req);
        let mut body = json!({
            "model": req.model,
            "messages": wire_messages(&req.messages),
            "temperature": req.temperature,
            "max_tokens": req.max_turn_tokens,
        });
        if let Some(tools) = &req.tools {
            let rendered: Vec<Value> = tools
                .iter()
                .map(|t| json!({"type": "function", "function": t}))
                .collect();
            body["tools"] = Value::Array(rendered);
        }
        match self.post("/chat/completions", &body) {
            Ok((value, retries)) => {
                let completion: ChatCompletion =
                    serde_json::from_value(value).map_err(|e| GatewayError::Transport {
                        message: format!("unexpected completion shape: {e}"),
                        retries,
                    })?;
                let first = completion.choices.into_iter().next().ok_or_else(|| {
                    GatewayError::Transport {
                        message: "empty choices".into(),
                        retries,
                    }
                })?;
                let tool_calls = first
                    .message
                    .tool_calls
                    .unwrap_or_default()
                    .into_iter()
                    .map(|c| ToolCall {
                        name: c.function.name,
                        arguments: serde_json::from_str(&c.function.arguments)
                            .unwrap_or(Value::String(c.function.arguments)),
                    })
                    .collect();
                self.record(CallKind::Chat, &req.model, fp, start, "ok", retries);
                Ok(ChatReply {
                    content: first.message.content.unwrap_or_default(),
                    tool_calls,
                })
            }
            Err(e) => {
                self.record(CallKind::Chat, &req.model, fp, start, &error_tag(&e), 0);
                Err(e)
            }
        }
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let _permit = self.semaphore.acquire();
        let start = Instant::now();
        let fp = embed_fingerprint(model, texts);
        let body = json!({"model": model, "input": texts});
        match self.post("/embeddings", &body) {
            Ok((value, retries)) => {
                let parsed: EmbeddingsResponse =
                    serde_json::from_value(value).map_err(|e| GatewayError::Transport {
                        message: format!("unexpected embeddings shape: {e}"),
                        retries,
                    })?;
                let mut rows = parsed.data;
                rows.sort_by_key(|r| r.index);
                if rows.len() != texts.len() {
                    return Err(GatewayError::DimensionMismatch {
                        expected: texts.len(),
                        got: rows.len(),
                    });
                }
                let vectors: Vec<Vec<f64>> = rows.into_iter().map(|r| r.embedding).collect();
                if let Some(first) = vectors.first() {
                    let d = first.len();
                    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
                        return Err(GatewayError::DimensionMismatch {
                            expected: d,
                            got: bad.len(),
                        });
                    }
                }
                self.record(CallKind::Embed, model, fp, start, "ok", retries);
                Ok(vectors)
            }
            Err(e) => {
                self.record(CallKind::Embed, model, fp, start, &error_tag(&e), 0);
                Err(e)
            }
        }
    }

    fn audit(&self) -> &AuditLog {
        &self.audit
    }
}

fn error_tag(e: &GatewayError) -> String {
    match e {
        GatewayError::Transport { .. } => "transport_error".into(),
        GatewayError::RateLimited { .. } => "rate_limited".into(),
        GatewayError::BadRequest { status, .. } => format!("http_{status}"),
        GatewayError::UnscriptedPrompt { .. } => "unscripted".into(),
        GatewayError::DimensionMismatch { .. } => "dimension_mismatch".into(),
    }
}
