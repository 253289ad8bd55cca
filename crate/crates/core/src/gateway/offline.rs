//! Fully offline backend that synthesizes plausible, deterministic replies
//! for every prompt kind in the pipeline. Replies are pure functions of the
//! request content and the backend seed, so whole-pipeline runs are
//! bit-reproducible without any network access.

use std::time::Instant;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{
    embed_fingerprint, fingerprint, hash_embedding, AuditEntry, AuditLog, CallKind, ChatGateway,
    ChatReply, ChatRequest, GatewayError, Role,
};
use crate::prompts::{markers, STOP_MARKER};

pub struct OfflineBackend {
    seed: u64,
    dim: usize,
    audit: AuditLog,
}

const WORDS: &[&str] = &[
    "ledger", "harbor", "meadow", "copper", "signal", "orchid", "quartz", "lantern", "breeze",
    "summit", "velvet", "cinder", "maple", "drift", "ember", "willow",
];

const DOMAINS: &[&str] = &[
    "data analysis",
    "entertainment",
    "travel",
    "finance",
    "shopping",
    "communication",
    "productivity",
    "health",
    "education",
    "security",
];

impl OfflineBackend {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            audit: AuditLog::new(),
        }
    }

    fn stable_hash(&self, text: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn words(&self, key: &str, count: usize) -> String {
        let mut h = self.stable_hash(key);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(WORDS[(h % WORDS.len() as u64) as usize]);
            h = h.rotate_left(13).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
        out.join(" ")
    }

    fn respond(&self, req: &ChatRequest) -> String {
        let system = req
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let first_user = req
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");

        if system.contains(markers::USER_SIM) {
            return self.user_turn(req, system);
        }
        if system.contains(markers::ASSISTANT) {
            return self.assistant_turn(req);
        }
        if first_user.contains(markers::COMPLETE_INPUT) {
            return self.completion(first_user, "input");
        }
        if first_user.contains(markers::COMPLETE_OUTPUT) {
            return self.completion(first_user, "output");
        }
        if first_user.contains(markers::EDGE_VALIDATOR) {
            let h = self.stable_hash(first_user);
            let ft = 5 + (h % 5);
            let ic = 5 + ((h / 5) % 5);
            return format!(
                "{{\"Field transitivity\": {ft}, \"Potential user intent path coherence\": {ic}}}"
            );
        }
        if first_user.contains(markers::INTENT) {
            return self.intent(first_user);
        }
        if first_user.contains(markers::TOOL_SIM) {
            return self.tool_result(first_user);
        }
        if first_user.contains(markers::TURN_JUDGE) {
            let h = self.stable_hash(first_user);
            return if h % 10 < 9 { "1".into() } else { "0".into() };
        }
        if first_user.contains(markers::TRAJECTORY_JUDGE) {
            let h = self.stable_hash(first_user);
            return if h % 10 < 9 { "1".into() } else { "0".into() };
        }
        if first_user.contains(markers::DOMAIN) {
            let h = self.stable_hash(first_user);
            let a = DOMAINS[(h % DOMAINS.len() as u64) as usize];
            if h.is_multiple_of(3) {
                let b = DOMAINS[((h / 7) % DOMAINS.len() as u64) as usize];
                if b != a {
                    return format!("[\"{a}\", \"{b}\"]");
                }
            }
            return format!("[\"{a}\"]");
        }
        // unknown prompt kind: echo a short deterministic line
        format!("ack {}", self.words(first_user, 3))
    }

    /// Parses the function JSON embedded after "The function is:" in the
    /// completion prompts.
    fn embedded_function(&self, prompt: &str) -> Option<Value> {
        let idx = prompt.find("The function is:")?;
        crate::util::extract_json_object(&prompt[idx..])
    }

    fn completion(&self, prompt: &str, side: &str) -> String {
        let function = self.embedded_function(prompt).unwrap_or(Value::Null);
        let fname = function["name"].as_str().unwrap_or("function");
        let empty = Map::new();
        let properties = function["parameters"]["properties"]
            .as_object()
            .unwrap_or(&empty);

        let mut structure: Vec<Value> = Vec::new();
        if side == "input" {
            for (pname, pval) in properties {
                let description = pval["description"]
                    .as_str()
                    .filter(|d| !d.is_empty())
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("{} for {fname}", self.words(pname, 2)));
                let ptype = pval["type"]
                    .as_str()
                    .filter(|t| !t.is_empty())
                    .unwrap_or("string");
                structure.push(json!({"name": pname, "description": description, "type": ptype}));
            }
            json!({
                "input description": format!("Inputs accepted by {fname}"),
                "input structure": structure,
            })
            .to_string()
        } else {
            // echo each input as a refined output so corpora that share
            // parameter vocabulary become connectable in the graph
            for (pname, pval) in properties {
                let description = pval["description"]
                    .as_str()
                    .filter(|d| !d.is_empty())
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("{} for {fname}", self.words(pname, 2)));
                let ptype = pval["type"]
                    .as_str()
                    .filter(|t| !t.is_empty())
                    .unwrap_or("string");
                structure.push(json!({"name": pname, "description": description, "type": ptype}));
            }
            structure.push(json!({
                "name": "result",
                "description": format!("Result payload of {fname}"),
                "type": "dict",
            }));
            json!({
                "output description": format!("Data returned by {fname}"),
                "output structure": structure,
            })
            .to_string()
        }
    }

    /// Parses the tools JSON array embedded after "### Tools" and returns
    /// the function names in listed order.
    fn tool_names(text: &str) -> Vec<String> {
        let Some(section) = text.find("### Tools") else {
            return Vec::new();
        };
        let Some(array) = crate::util::extract_json_array(&text[section..]) else {
            return Vec::new();
        };
        array
            .as_array()
            .map(|items| {
                items
                    .iter()
                    .filter_map(|t| t["name"].as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn intent(&self, prompt: &str) -> String {
        let names = Self::tool_names(prompt);
        let persona = self.words(prompt, 2);
        let instruction = if names.is_empty() {
            format!("I am planning a {persona} project and need hands-on help finishing it today.")
        } else {
            format!(
                "I am working on a {persona} project. Help me work through it step by step; \
                 along the way I expect to need {}.",
                names.join(", ")
            )
        };
        json!({
            "Task Instruction": instruction,
            "Tool Usage": names.join(", "),
        })
        .to_string()
    }

    fn user_turn(&self, req: &ChatRequest, system: &str) -> String {
        let own_lines = req
            .messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count();
        let planned = 2 + (self.stable_hash(system) % 2) as usize;
        if own_lines >= planned {
            return STOP_MARKER.to_string();
        }
        if own_lines == 0 {
            format!(
                "Hi! To start, could you look into the {} part for me?",
                self.words(system, 2)
            )
        } else {
            format!(
                "Thanks. Next, please handle the {} step as well.",
                self.words(&format!("{system}:{own_lines}"), 2)
            )
        }
    }

    fn assistant_turn(&self, req: &ChatRequest) -> String {
        let last = req.messages.last();
        if let Some(last) = last {
            if last.role == Role::Tool {
                let gist = self.words(&last.content, 3);
                return format!(
                    "<think>The tool result arrived; summarize it for the user.</think>\
                     The lookup finished: {gist}. Anything else?"
                );
            }
        }
        let names: Vec<String> = req
            .tools
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .filter_map(|t| t["name"].as_str().map(str::to_string))
            .collect();
        let calls_so_far = req
            .messages
            .iter()
            .filter(|m| {
                m.role == Role::Assistant && m.tool_calls.as_deref().is_some_and(|c| !c.is_empty())
            })
            .count();
        if calls_so_far < names.len() {
            let name = &names[calls_so_far];
            let args = self.arguments_for(req, name);
            return format!(
                "<think>The user's request maps to {name}; call it now.</think>\
                 <tool_call>{}</tool_call>",
                json!({"name": name, "arguments": args})
            );
        }
        format!(
            "<think>No further function is needed for this request.</think>\
             All the requested steps are complete: {}.",
            self.words(&format!("wrap:{}", req.messages.len()), 3)
        )
    }

    /// Fills a call's arguments from the tool's schema: required parameters
    /// get deterministic dummy values by declared type.
    fn arguments_for(&self, req: &ChatRequest, name: &str) -> Value {
        let tool = req
            .tools
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .find(|t| t["name"].as_str() == Some(name))
            .cloned()
            .unwrap_or(Value::Null);
        let mut args = Map::new();
        if let Some(required) = tool["parameters"]["required"].as_array() {
            for r in required {
                let Some(pname) = r.as_str() else { continue };
                let ptype = tool["parameters"]["properties"][pname]["type"]
                    .as_str()
                    .unwrap_or("string");
                let value = match ptype {
                    "int" => Value::from((self.stable_hash(pname) % 100) as i64),
                    "float" => Value::from((self.stable_hash(pname) % 1000) as f64 / 10.0),
                    "boolean" => Value::Bool(self.stable_hash(pname).is_multiple_of(2)),
                    "list" => json!([self.words(pname, 1)]),
                    "dict" => json!({"value": self.words(pname, 1)}),
                    _ => Value::String(self.words(pname, 2)),
                };
                args.insert(pname.to_string(), value);
            }
        }
        Value::Object(args)
    }

    fn tool_result(&self, prompt: &str) -> String {
        if prompt.contains("No function named") {
            return format!(
                "<func_return> {} </func_return>",
                json!({"error": "unknown function name in call"})
            );
        }
        let h = self.stable_hash(prompt);
        let body = json!({
            "status": "ok",
            "data": self.words(prompt, 4),
            "trace_id": format!("sim-{h:08x}"),
        });
        format!("<func_return> {body} </func_return>")
    }
}

impl ChatGateway for OfflineBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let start = Instant::now();
        let content = self.respond(req);
        self.audit.record(AuditEntry {
            ts_ms: super::now_ms(),
            kind: CallKind::Chat,
            model: req.model.clone(),
            fingerprint: fingerprint(req),
            latency_ms: start.elapsed().as_millis() as u64,
            status: "ok".to_string(),
            retries: 0,
        });
        Ok(ChatReply {
            content,
            tool_calls: Vec::new(),
        })
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
    use crate::gateway::ChatMessage;
    use crate::prompts;

    fn req(messages: Vec<ChatMessage>, tools: Option<Vec<Value>>) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages,
            tools,
            temperature: 0.0,
            max_turn_tokens: 256,
        }
    }

    #[test]
    fn replies_are_deterministic() {
        let a = OfflineBackend::new(7, 8);
        let b = OfflineBackend::new(7, 8);
        let r = req(prompts::intent_messages("[{\"name\": \"f\"}]"), None);
        assert_eq!(a.chat(&r).unwrap().content, b.chat(&r).unwrap().content);
        let c = OfflineBackend::new(8, 8);
        assert_ne!(a.chat(&r).unwrap().content, c.chat(&r).unwrap().content);
    }

    #[test]
    fn validator_replies_parse_strictly() {
        let gw = OfflineBackend::new(7, 8);
        let r = req(
            prompts::edge_validator_messages("{\"name\":\"a\"}", "{\"name\":\"b\"}"),
            None,
        );
        let content = gw.chat(&r).unwrap().content;
        let v = crate::util::extract_json_object(&content).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 2);
        assert!(v["Field transitivity"].as_u64().unwrap() <= 9);
    }

    #[test]
    fn user_simulation_asks_then_stops_but_never_on_turn_one() {
        let gw = OfflineBackend::new(7, 8);
        let system = prompts::user_sim_system("book a trip");
        let first = gw
            .chat(&req(vec![ChatMessage::system(system.clone())], None))
            .unwrap();
        assert!(!first.content.contains(STOP_MARKER));

        // after enough own lines the simulated user stops
        let mut messages = vec![ChatMessage::system(system)];
        for i in 0..4 {
            messages.push(ChatMessage::assistant(format!("my line {i}")));
            messages.push(ChatMessage::user(format!("assistant reply {i}")));
        }
        let later = gw.chat(&req(messages, None)).unwrap();
        assert!(later.content.contains(STOP_MARKER));
    }

    #[test]
    fn assistant_calls_each_tool_once_then_wraps_up() {
        let gw = OfflineBackend::new(7, 8);
        let tools = vec![
            json!({"name": "alpha", "description": "", "parameters": {"type": "dict", "properties": {"q": {"type": "string", "description": "query"}}, "required": ["q"]}}),
        ];
        let system = prompts::assistant_system("[tools]");
        let first = gw
            .chat(&req(
                vec![ChatMessage::system(system.clone()), ChatMessage::user("go")],
                Some(tools.clone()),
            ))
            .unwrap();
        assert!(first.content.contains("<tool_call>"));
        assert!(first.content.contains("alpha"));

        let after_call = gw
            .chat(&req(
                vec![
                    ChatMessage::system(system.clone()),
                    ChatMessage::user("go"),
                    ChatMessage {
                        role: Role::Assistant,
                        content: String::new(),
                        tool_calls: Some(vec![crate::gateway::ToolCall {
                            name: "alpha".into(),
                            arguments: json!({"q": "x"}),
                        }]),
                    },
                    ChatMessage::tool("{\"ok\": true}"),
                ],
                Some(tools),
            ))
            .unwrap();
        assert!(!after_call.content.contains("<tool_call>"));
    }

    #[test]
    fn tool_simulation_wraps_json_in_func_return() {
        let gw = OfflineBackend::new(7, 8);
        let r = req(
            prompts::tool_sim_messages("{\"name\": \"f\"}", "[{\"name\": \"f\"}]"),
            None,
        );
        let content = gw.chat(&r).unwrap().content;
        assert!(crate::synthesis::parse_func_return(&content).is_ok());
    }

    #[test]
    fn judge_replies_are_single_digits() {
        let gw = OfflineBackend::new(7, 8);
        for r in [
            req(prompts::trajectory_judge_messages("[]", "user: hi"), None),
            req(
                prompts::turn_judge_messages("[]", "user: hi", "assistant: hello"),
                None,
            ),
        ] {
            let content = gw.chat(&r).unwrap().content;
            assert!(content == "0" || content == "1", "got {content}");
        }
    }

    #[test]
    fn completion_replies_echo_inputs_into_outputs() {
        let gw = OfflineBackend::new(7, 8);
        let function = json!({
            "name": "geo",
            "parameters": {"type": "dict", "properties": {"city": {"description": "The city name", "type": "string"}}}
        });
        let r = req(
            prompts::complete_output_messages(&function.to_string()),
            None,
        );
        let content = gw.chat(&r).unwrap().content;
        let v = crate::util::extract_json_object(&content).unwrap();
        let structure = v["output structure"].as_array().unwrap();
        assert!(structure
            .iter()
            .any(|e| e["name"] == "city" && e["description"] == "The city name"));
        assert!(structure.iter().any(|e| e["name"] == "result"));
    }
}
