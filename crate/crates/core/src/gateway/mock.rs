//! Scripted mock backend: chat answers come from a transcript keyed by
//! prompt fingerprint, embeddings are deterministic hash vectors.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Instant;

use super::{
    embed_fingerprint, fingerprint, hash_embedding, AuditEntry, AuditLog, CallKind, ChatGateway,
    ChatMessage, ChatReply, ChatRequest, GatewayError,
};

/// Deterministic offline test double.
///
/// Lookup order for a chat request: exact transcript entry by fingerprint,
/// then the next queued sequence reply, then the default reply. Anything
/// else is an [`GatewayError::UnscriptedPrompt`] so tests fail loudly.
pub struct MockGateway {
    transcript: Mutex<HashMap<String, String>>,
    sequence: Mutex<VecDeque<String>>,
    default_reply: Mutex<Option<String>>,
    seed: u64,
    dim: usize,
    audit: AuditLog,
}

impl MockGateway {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            transcript: Mutex::new(HashMap::new()),
            sequence: Mutex::new(VecDeque::new()),
            default_reply: Mutex::new(None),
            seed,
            dim,
            audit: AuditLog::new(),
        }
    }

    /// Script a reply for the request formed by `model` + `messages`.
    pub fn script(&self, model: &str, messages: &[ChatMessage], reply: impl Into<String>) {
        let req = ChatRequest {
            model: model.to_string(),
            messages: messages.to_vec(),
            tools: None,
            temperature: 0.0,
            max_turn_tokens: 0,
        };
        self.script_fingerprint(fingerprint(&req), reply);
    }

    /// Script a reply by raw fingerprint.
    pub fn script_fingerprint(&self, fp: impl Into<String>, reply: impl Into<String>) {
        self.transcript
            .lock()
            .unwrap()
            .insert(fp.into(), reply.into());
    }

    /// Queue replies consumed in call order when no fingerprint matches.
    pub fn push_sequence<I: IntoIterator<Item = S>, S: Into<String>>(&self, replies: I) {
        let mut seq = self.sequence.lock().unwrap();
        for r in replies {
            seq.push_back(r.into());
        }
    }

    /// Answer every otherwise-unscripted prompt with `reply`.
    pub fn set_default_reply(&self, reply: impl Into<String>) {
        *self.default_reply.lock().unwrap() = Some(reply.into());
    }

    /// Audit access without needing the trait in scope.
    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn lookup(&self, fp: &str) -> Option<String> {
        if let Some(reply) = self.transcript.lock().unwrap().get(fp) {
            return Some(reply.clone());
        }
        if let Some(reply) = self.sequence.lock().unwrap().pop_front() {
            return Some(reply);
        }
        self.default_reply.lock().unwrap().clone()
    }
}

impl ChatGateway for MockGateway {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let start = Instant::now();
        let fp = fingerprint(req);
        let result = self.lookup(&fp);
        let status = if result.is_some() { "ok" } else { "unscripted" };
        self.audit.record(AuditEntry {
            ts_ms: super::now_ms(),
            kind: CallKind::Chat,
            model: req.model.clone(),
            fingerprint: fp.clone(),
            latency_ms: start.elapsed().as_millis() as u64,
            status: status.to_string(),
            retries: 0,
        });
        match result {
            Some(content) => Ok(ChatReply {
                content,
                tool_calls: Vec::new(),
            }),
            None => Err(GatewayError::UnscriptedPrompt { fingerprint: fp }),
        }
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let start = Instant::now();
        let vectors = texts
            .iter()
            .map(|t| hash_embedding(t, self.seed, self.dim))
            .collect();
        self.audit.record(AuditEntry {
            ts_ms: super::now_ms(),
            kind: CallKind::Embed,
            model: model.to_string(),
            fingerprint: embed_fingerprint(model, texts),
            latency_ms: start.elapsed().as_millis() as u64,
            status: "ok".to_string(),
            retries: 0,
        });
        Ok(vectors)
    }

    fn audit(&self) -> &AuditLog {
        &self.audit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Agent;
    use std::sync::Arc;

    #[test]
    fn scripted_reply_is_byte_identical_across_calls() {
        let gw = MockGateway::new(1, 8);
        let messages = vec![ChatMessage::user("ping")];
        gw.script("m", &messages, "pong");
        let agent = Agent {
            gateway: Arc::new(gw),
            model: "m".into(),
            temperature: 0.0,
            max_turn_tokens: 0,
        };
        let a = agent.chat(messages.clone(), None).unwrap();
        let b = agent.chat(messages, None).unwrap();
        assert_eq!(a.content, "pong");
        assert_eq!(a.content, b.content);
    }

    #[test]
    fn unscripted_prompt_errors_with_fingerprint() {
        let gw = MockGateway::new(1, 8);
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("nothing scripted")],
            tools: None,
            temperature: 0.0,
            max_turn_tokens: 0,
        };
        let expected = fingerprint(&req);
        match gw.chat(&req) {
            Err(GatewayError::UnscriptedPrompt { fingerprint }) => {
                assert_eq!(fingerprint, expected)
            }
            other => panic!("expected UnscriptedPrompt, got {other:?}"),
        }
    }

    #[test]
    fn sequence_replies_consume_in_order() {
        let gw = MockGateway::new(1, 8);
        gw.push_sequence(["one", "two"]);
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("q")],
            tools: None,
            temperature: 0.0,
            max_turn_tokens: 0,
        };
        assert_eq!(gw.chat(&req).unwrap().content, "one");
        assert_eq!(gw.chat(&req).unwrap().content, "two");
        assert!(gw.chat(&req).is_err());
    }

    #[test]
    fn embeddings_are_text_stable_and_distinct() {
        let gw = MockGateway::new(42, 16);
        let out = gw
            .embed(
                "e",
                &["alpha".to_string(), "beta".to_string(), "alpha".to_string()],
            )
            .unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
    }
}
