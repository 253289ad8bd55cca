//! Three-agent conversation synthesis: a user agent pursues a synthesized
//! intent, an assistant agent answers and calls functions, and a tool agent
//! simulates execution results. The loop runs until the user declares
//! fulfillment with the stop marker, a turn limit hits, or a protocol
//! violation aborts the trajectory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fn_graph::FunctionChain;
use crate::gateway::{chat_strict, Agent, ChatMessage, GatewayError, StrictOutcome, ToolCall};
use crate::prompts::{self, STOP_MARKER};
use crate::spec_model::FunctionSpec;
use crate::util::normalize_ws;

mod parse;

pub use parse::{parse_assistant_message, parse_func_return, AssistantParseError, FuncReturnError};

/// The goal a simulated user pursues across a conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserIntent {
    pub chain_ref: String,
    pub task_instruction: String,
    /// Free text or a list, as the intent prompt returns it.
    pub tool_usage: Value,
    #[serde(default)]
    pub domain_labels: Vec<String>,
}

/// One stored conversation message. Assistant messages carry the full
/// think / content / tool_calls decomposition; tags are never re-embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Message {
    User {
        content: String,
    },
    Assistant {
        think: String,
        content: String,
        tool_calls: Vec<ToolCall>,
    },
    Tool {
        tool_result: Value,
    },
}

impl Message {
    pub fn is_assistant(&self) -> bool {
        matches!(self, Message::Assistant { .. })
    }

    pub fn is_user(&self) -> bool {
        matches!(self, Message::User { .. })
    }

    pub fn assistant_tool_calls(&self) -> &[ToolCall] {
        match self {
            Message::Assistant { tool_calls, .. } => tool_calls,
            _ => &[],
        }
    }
}

/// How a simulation ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    /// The user agent emitted the stop marker (stripped from storage).
    Stopped,
    /// max_user_turns was reached without a stop.
    TurnLimit,
    Aborted {
        reason: String,
    },
}

/// One complete simulated conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub intent: UserIntent,
    /// Raw-record-shaped projections of the chain's functions.
    pub tools: Vec<Value>,
    pub messages: Vec<Message>,
    pub outcome: Outcome,
    pub seed: u64,
}

/// Loop guards, plain configuration with conservative defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimLimits {
    #[serde(default = "default_max_user_turns")]
    pub max_user_turns: usize,
    /// Cap on simulated tool executions within one user turn.
    #[serde(default = "default_max_tool_steps")]
    pub max_consecutive_tool_steps: usize,
    #[serde(default = "default_max_turn_tokens")]
    pub max_turn_tokens: u32,
}

fn default_max_user_turns() -> usize {
    12
}
fn default_max_tool_steps() -> usize {
    8
}
fn default_max_turn_tokens() -> u32 {
    1024
}

impl Default for SimLimits {
    fn default() -> Self {
        Self {
            max_user_turns: default_max_user_turns(),
            max_consecutive_tool_steps: default_max_tool_steps(),
            max_turn_tokens: default_max_turn_tokens(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("intent reply format invalid after {attempts} attempts: {last_raw}")]
    IntentFormat { attempts: u32, last_raw: String },
    #[error("chain step '{0}' resolves to no known spec")]
    ChainUnresolved(String),
    #[error("tool simulator format invalid for '{name}': {detail}")]
    ToolFormat { name: String, detail: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Format retries for the intent prompt.
pub const INTENT_RETRIES: u32 = 1;
/// Format retries for the tool simulator.
pub const TOOL_SIM_RETRIES: u32 = 1;

/// The chain's functions in first-visit order, deduplicated (walks may
/// revisit a node while budget remains).
pub fn chain_tools<'a>(
    chain: &FunctionChain,
    corpus: &'a BTreeMap<String, FunctionSpec>,
) -> Result<Vec<&'a FunctionSpec>, SynthesisError> {
    let mut seen = std::collections::HashSet::new();
    let mut tools = Vec::new();
    for step in &chain.steps {
        if !seen.insert(step.as_str()) {
            continue;
        }
        let spec = corpus
            .get(step)
            .ok_or_else(|| SynthesisError::ChainUnresolved(step.clone()))?;
        tools.push(spec);
    }
    Ok(tools)
}

fn tools_json(tools: &[&FunctionSpec]) -> String {
    let values: Vec<Value> = tools.iter().map(|t| t.projection()).collect();
    serde_json::to_string_pretty(&values).expect("projection serialization")
}

fn parse_intent_reply(content: &str) -> Option<(String, Value)> {
    let value = crate::util::extract_json_object(content)?;
    let obj = value.as_object()?;
    if obj.len() != 2 {
        return None;
    }
    let instruction = normalize_ws(obj.get("Task Instruction")?.as_str()?);
    if instruction.is_empty() {
        return None;
    }
    let usage = obj.get("Tool Usage")?.clone();
    Some((instruction, usage))
}

/// Synthesizes a user intent for a sampled chain. The prompt lists the
/// chain's tools; the reply must be the strict two-field JSON.
pub fn synthesize_intent(
    agent: &Agent,
    chain: &FunctionChain,
    corpus: &BTreeMap<String, FunctionSpec>,
) -> Result<UserIntent, SynthesisError> {
    let tools = chain_tools(chain, corpus)?;
    let outcome = chat_strict(
        agent,
        prompts::intent_messages(&tools_json(&tools)),
        None,
        prompts::JSON_REPROMPT,
        INTENT_RETRIES,
        |reply| parse_intent_reply(&reply.content),
    )?;
    match outcome {
        StrictOutcome::Parsed {
            value: (task_instruction, tool_usage),
            ..
        } => Ok(UserIntent {
            chain_ref: chain.id.clone(),
            task_instruction,
            tool_usage,
            domain_labels: Vec::new(),
        }),
        StrictOutcome::FormatFailed { last_raw, attempts } => {
            Err(SynthesisError::IntentFormat { attempts, last_raw })
        }
    }
}

/// Simulates one function execution. `spec` is `None` when the call names
/// an unknown function; the simulator prompt then mandates a JSON error
/// object, which is stored as a normal tool message.
pub fn simulate_tool(
    agent: &Agent,
    spec: Option<&FunctionSpec>,
    call: &ToolCall,
) -> Result<Message, SynthesisError> {
    let function_info = match spec {
        Some(s) => serde_json::to_string_pretty(&s.projection()).expect("projection"),
        None => format!(
            "No function named '{}' is defined in this conversation.",
            call.name
        ),
    };
    let call_json = serde_json::to_string(&vec![call]).expect("tool call serialization");
    let outcome = chat_strict(
        agent,
        prompts::tool_sim_messages(&function_info, &call_json),
        None,
        prompts::FUNC_RETURN_REPROMPT,
        TOOL_SIM_RETRIES,
        |reply| parse_func_return(&reply.content).ok(),
    )?;
    match outcome {
        StrictOutcome::Parsed { value, .. } => Ok(Message::Tool { tool_result: value }),
        StrictOutcome::FormatFailed { last_raw, .. } => Err(SynthesisError::ToolFormat {
            name: call.name.clone(),
            detail: format!("no parseable <func_return> region in: {last_raw}"),
        }),
    }
}

/// Renders one stored message as judge-facing text. Think content is kept:
/// judges evaluate the full response, reasoning included.
pub fn render_message(msg: &Message) -> String {
    match msg {
        Message::User { content } => format!("user: {content}"),
        Message::Assistant {
            think,
            content,
            tool_calls,
        } => {
            let mut parts = vec!["assistant:".to_string()];
            if !think.is_empty() {
                parts.push(format!("<think>{think}</think>"));
            }
            if !content.is_empty() {
                parts.push(content.clone());
            }
            for call in tool_calls {
                parts.push(format!(
                    "<tool_call>{}</tool_call>",
                    serde_json::to_string(call).expect("tool call serialization")
                ));
            }
            parts.join("\n")
        }
        Message::Tool { tool_result } => {
            format!(
                "tool: {}",
                serde_json::to_string(tool_result).expect("json")
            )
        }
    }
}

pub fn render_transcript(messages: &[Message]) -> String {
    messages
        .iter()
        .map(render_message)
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The user agent sees the conversation from the simulated human's side:
/// its own previous lines come back as `assistant` turns and the real
/// assistant's visible replies arrive as `user` turns. Tool traffic and
/// reasoning are not shown to it.
fn user_view(intent: &UserIntent, messages: &[Message]) -> Vec<ChatMessage> {
    let mut view = vec![ChatMessage::system(prompts::user_sim_system(
        &intent.task_instruction,
    ))];
    for msg in messages {
        match msg {
            Message::User { content } => view.push(ChatMessage::assistant(content.clone())),
            Message::Assistant { content, .. } if !content.is_empty() => {
                view.push(ChatMessage::user(content.clone()));
            }
            _ => {}
        }
    }
    view
}

/// The assistant agent sees the standard conversation, minus prior think
/// blocks (reasoning is not replayed across turns).
fn assistant_view(system: &str, messages: &[Message]) -> Vec<ChatMessage> {
    let mut view = vec![ChatMessage::system(system.to_string())];
    for msg in messages {
        match msg {
            Message::User { content } => view.push(ChatMessage::user(content.clone())),
            Message::Assistant {
                content,
                tool_calls,
                ..
            } => view.push(ChatMessage {
                role: crate::gateway::Role::Assistant,
                content: content.clone(),
                tool_calls: if tool_calls.is_empty() {
                    None
                } else {
                    Some(tool_calls.clone())
                },
            }),
            Message::Tool { tool_result } => view.push(ChatMessage::tool(
                serde_json::to_string(tool_result).expect("json"),
            )),
        }
    }
    view
}

/// The three role gateways driving one simulation.
pub struct AgentTrio {
    pub user: Agent,
    pub assistant: Agent,
    pub tool: Agent,
}

impl AgentTrio {
    /// Applies the simulation's per-message token cap to all three roles.
    fn capped(&self, max_turn_tokens: u32) -> AgentTrio {
        let cap = |agent: &Agent| {
            let mut agent = agent.clone();
            agent.max_turn_tokens = max_turn_tokens;
            agent
        };
        AgentTrio { user: cap(&self.user), assistant: cap(&self.assistant), tool: cap(&self.tool) }
    }
}

fn contains_stop(msg: &Message) -> bool {
    match msg {
        Message::User { content } => content.contains(STOP_MARKER),
        Message::Assistant { think, content, .. } => {
            think.contains(STOP_MARKER) || content.contains(STOP_MARKER)
        }
        Message::Tool { tool_result } => serde_json::to_string(tool_result)
            .unwrap_or_default()
            .contains(STOP_MARKER),
    }
}

/// Runs the iterative user → assistant → tool loop for one intent.
///
/// Termination: `Stopped` when the user agent's reply contains the stop
/// marker (that reply is excluded from storage; a first-turn stop aborts as
/// protocol-violating), `TurnLimit` after `max_user_turns`, `Aborted` on
/// unrecoverable gateway or format errors. Aborted trajectories are
/// returned for audit, never dropped.
pub fn run_simulation(
    id: impl Into<String>,
    trio: &AgentTrio,
    intent: &UserIntent,
    tools: &[&FunctionSpec],
    limits: &SimLimits,
    seed: u64,
) -> Trajectory {
    let id = id.into();
    let projections: Vec<Value> = tools.iter().map(|t| t.projection()).collect();
    let by_name: BTreeMap<&str, &FunctionSpec> =
        tools.iter().map(|t| (t.name.as_str(), *t)).collect();
    let assistant_sys = prompts::assistant_system(&tools_json(tools));
    let trio = trio.capped(limits.max_turn_tokens);

    let mut messages: Vec<Message> = Vec::new();
    let outcome = simulation_loop(
        &trio,
        intent,
        &by_name,
        &assistant_sys,
        &projections,
        limits,
        &mut messages,
    );

    Trajectory {
        id,
        intent: intent.clone(),
        tools: projections,
        messages,
        outcome,
        seed,
    }
}

fn simulation_loop(
    trio: &AgentTrio,
    intent: &UserIntent,
    by_name: &BTreeMap<&str, &FunctionSpec>,
    assistant_sys: &str,
    projections: &[Value],
    limits: &SimLimits,
    messages: &mut Vec<Message>,
) -> Outcome {
    for user_turn in 0..limits.max_user_turns {
        let user_reply = match trio.user.chat(user_view(intent, messages), None) {
            Ok(r) => r,
            Err(e) => {
                return Outcome::Aborted {
                    reason: format!("gateway: {e}"),
                }
            }
        };
        if user_reply.content.contains(STOP_MARKER) {
            if user_turn == 0 {
                return Outcome::Aborted {
                    reason: "first-turn-stop".into(),
                };
            }
            return Outcome::Stopped;
        }
        let user_msg = Message::User {
            content: normalize_ws(&user_reply.content),
        };
        if let Message::User { content } = &user_msg {
            if content.is_empty() {
                return Outcome::Aborted {
                    reason: "empty-user-message".into(),
                };
            }
        }
        messages.push(user_msg);

        let mut tool_steps = 0usize;
        loop {
            let msg = match assistant_turn(trio, assistant_sys, projections, messages) {
                Ok(m) => m,
                Err(reason) => return Outcome::Aborted { reason },
            };
            if contains_stop(&msg) {
                return Outcome::Aborted {
                    reason: "stop-marker-leak".into(),
                };
            }
            let calls = msg.assistant_tool_calls().to_vec();
            messages.push(msg);
            if calls.is_empty() {
                break;
            }
            tool_steps += calls.len();
            if tool_steps > limits.max_consecutive_tool_steps {
                return Outcome::Aborted {
                    reason: "tool-loop".into(),
                };
            }
            for call in &calls {
                let tool_msg =
                    match simulate_tool(&trio.tool, by_name.get(call.name.as_str()).copied(), call)
                    {
                        Ok(m) => m,
                        Err(e) => {
                            return Outcome::Aborted {
                                reason: format!("tool-format: {e}"),
                            }
                        }
                    };
                if contains_stop(&tool_msg) {
                    return Outcome::Aborted {
                        reason: "stop-marker-leak".into(),
                    };
                }
                messages.push(tool_msg);
            }
        }
    }
    Outcome::TurnLimit
}

/// One assistant exchange with a single format retry: a malformed reply is
/// answered with a corrective user message (not stored in the trajectory).
fn assistant_turn(
    trio: &AgentTrio,
    assistant_sys: &str,
    projections: &[Value],
    messages: &[Message],
) -> Result<Message, String> {
    let mut view = assistant_view(assistant_sys, messages);
    let mut last_error = String::new();
    for attempt in 0..2 {
        let reply = trio
            .assistant
            .chat(view.clone(), Some(projections.to_vec()))
            .map_err(|e| format!("gateway: {e}"))?;
        match parse_assistant_message(&reply) {
            Ok(msg) => return Ok(msg),
            Err(e) => {
                last_error = e.to_string();
                if attempt == 0 {
                    view.push(ChatMessage::assistant(reply.content));
                    view.push(ChatMessage::user(prompts::TOOL_CALL_REPROMPT));
                }
            }
        }
    }
    Err(format!("malformed-assistant-message: {last_error}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockGateway;
    use crate::spec_model::{parse_function_spec, Provenance};
    use std::sync::Arc;

    fn spec_fixture(name: &str) -> FunctionSpec {
        parse_function_spec(
            &format!(
                r#"{{"name": "{name}", "description": "{name} tool", "parameters": {{"type": "dict", "properties": {{"q": {{"description": "query", "type": "string"}}}}, "required": []}}, "outputs": [{{"name": "r", "description": "result", "type": "dict"}}]}}"#
            ),
            Provenance { source: "t".into(), locator: "0".into() },
        )
        .unwrap()
    }

    fn agent(gw: Arc<MockGateway>, model: &str) -> Agent {
        Agent {
            gateway: gw,
            model: model.into(),
            temperature: 0.0,
            max_turn_tokens: 256,
        }
    }

    fn trio(
        user: Arc<MockGateway>,
        assistant: Arc<MockGateway>,
        tool: Arc<MockGateway>,
    ) -> AgentTrio {
        AgentTrio {
            user: agent(user, "user-model"),
            assistant: agent(assistant, "assistant-model"),
            tool: agent(tool, "tool-model"),
        }
    }

    fn intent_fixture() -> UserIntent {
        UserIntent {
            chain_ref: "chain-00000".into(),
            task_instruction: "Look one thing up, then wrap up.".into(),
            tool_usage: Value::String("use lookup".into()),
            domain_labels: Vec::new(),
        }
    }

    #[test]
    fn intent_parses_strict_two_field_json() {
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply(r#"{"Task Instruction":"t","Tool Usage":"u"}"#);
        let chain = FunctionChain {
            id: "chain-00000".into(),
            steps: vec![],
            length: 0,
        };
        let corpus = BTreeMap::new();
        let intent = synthesize_intent(&agent(gw, "m"), &chain, &corpus).unwrap();
        assert_eq!(intent.task_instruction, "t");
        assert_eq!(intent.tool_usage, Value::String("u".into()));
    }

    #[test]
    fn intent_missing_field_is_a_format_error() {
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply(r#"{"Task Instruction":"t"}"#);
        let chain = FunctionChain {
            id: "c".into(),
            steps: vec![],
            length: 0,
        };
        match synthesize_intent(&agent(gw, "m"), &chain, &BTreeMap::new()) {
            Err(SynthesisError::IntentFormat { attempts, .. }) => {
                assert_eq!(attempts, INTENT_RETRIES + 1)
            }
            other => panic!("expected IntentFormat, got {other:?}"),
        }
    }

    #[test]
    fn unresolved_chain_step_errors() {
        let gw = Arc::new(MockGateway::new(0, 8));
        let chain = FunctionChain {
            id: "c".into(),
            steps: vec!["ghost".into()],
            length: 0,
        };
        assert!(matches!(
            synthesize_intent(&agent(gw, "m"), &chain, &BTreeMap::new()),
            Err(SynthesisError::ChainUnresolved(_))
        ));
    }

    #[test]
    fn tool_simulation_stores_the_func_return_interior() {
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply("<func_return> {\"temperature\": \"25\u{00b0}C\"} </func_return>");
        let spec = spec_fixture("get_weather");
        let call = ToolCall {
            name: "get_weather".into(),
            arguments: serde_json::json!({"city": "New York"}),
        };
        let msg = simulate_tool(&agent(gw, "m"), Some(&spec), &call).unwrap();
        let Message::Tool { tool_result } = msg else {
            panic!()
        };
        assert_eq!(tool_result["temperature"], "25\u{00b0}C");
    }

    #[test]
    fn unknown_function_still_yields_a_tool_message() {
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply(
            r#"<func_return> {"error": "unknown function 'ghost'"} </func_return>"#,
        );
        let call = ToolCall {
            name: "ghost".into(),
            arguments: serde_json::json!({}),
        };
        let msg = simulate_tool(&agent(gw, "m"), None, &call).unwrap();
        let Message::Tool { tool_result } = msg else {
            panic!()
        };
        assert!(tool_result["error"].as_str().unwrap().contains("ghost"));
    }

    #[test]
    fn tool_replies_without_tags_twice_abort() {
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply("plain text, no tags");
        let call = ToolCall {
            name: "f".into(),
            arguments: serde_json::json!({}),
        };
        assert!(matches!(
            simulate_tool(&agent(gw, "m"), None, &call),
            Err(SynthesisError::ToolFormat { .. })
        ));
    }

    #[test]
    fn stop_flow_strips_the_marker_message() {
        let user_gw = Arc::new(MockGateway::new(0, 8));
        user_gw.push_sequence(["Could you look up widgets for me?", "###STOP### thanks"]);
        let assistant_gw = Arc::new(MockGateway::new(0, 8));
        assistant_gw.push_sequence([
            "<think>One lookup call.</think><tool_call>{\"name\": \"lookup\", \"arguments\": {\"q\": \"widgets\"}}</tool_call>",
            "<think>Summarize.</think>Found 3 widgets in stock.",
        ]);
        let tool_gw = Arc::new(MockGateway::new(0, 8));
        tool_gw.push_sequence(["<func_return> {\"count\": 3} </func_return>"]);
        let spec = spec_fixture("lookup");
        let traj = run_simulation(
            "traj-0",
            &trio(user_gw, assistant_gw, tool_gw),
            &intent_fixture(),
            &[&spec],
            &SimLimits::default(),
            7,
        );
        assert_eq!(traj.outcome, Outcome::Stopped);
        assert_eq!(traj.messages.len(), 4); // user, assistant+call, tool, assistant
        assert!(traj.messages[0].is_user());
        assert!(!render_transcript(&traj.messages).contains(STOP_MARKER));
    }

    #[test]
    fn turn_limit_applies_after_max_user_turns() {
        let user_gw = Arc::new(MockGateway::new(0, 8));
        user_gw.set_default_reply("Tell me more about widgets.");
        let assistant_gw = Arc::new(MockGateway::new(0, 8));
        assistant_gw.set_default_reply("<think>chat only</think>Happy to help with widgets.");
        let tool_gw = Arc::new(MockGateway::new(0, 8));
        let spec = spec_fixture("lookup");
        let limits = SimLimits {
            max_user_turns: 2,
            ..Default::default()
        };
        let traj = run_simulation(
            "traj-1",
            &trio(user_gw, assistant_gw, tool_gw),
            &intent_fixture(),
            &[&spec],
            &limits,
            7,
        );
        assert_eq!(traj.outcome, Outcome::TurnLimit);
        assert_eq!(traj.messages.iter().filter(|m| m.is_user()).count(), 2);
    }

    #[test]
    fn first_turn_stop_aborts_as_protocol_violation() {
        let user_gw = Arc::new(MockGateway::new(0, 8));
        user_gw.set_default_reply("###STOP###");
        let assistant_gw = Arc::new(MockGateway::new(0, 8));
        let tool_gw = Arc::new(MockGateway::new(0, 8));
        let spec = spec_fixture("lookup");
        let traj = run_simulation(
            "traj-2",
            &trio(user_gw, assistant_gw, tool_gw),
            &intent_fixture(),
            &[&spec],
            &SimLimits::default(),
            7,
        );
        assert_eq!(
            traj.outcome,
            Outcome::Aborted {
                reason: "first-turn-stop".into()
            }
        );
        assert!(traj.messages.is_empty());
    }

    #[test]
    fn malformed_assistant_reply_retries_once_then_aborts() {
        let user_gw = Arc::new(MockGateway::new(0, 8));
        user_gw.set_default_reply("Question?");
        let assistant_gw = Arc::new(MockGateway::new(0, 8));
        assistant_gw.set_default_reply("<tool_call>{broken</tool_call>");
        let tool_gw = Arc::new(MockGateway::new(0, 8));
        let spec = spec_fixture("lookup");
        let traj = run_simulation(
            "traj-3",
            &trio(user_gw, assistant_gw.clone(), tool_gw),
            &intent_fixture(),
            &[&spec],
            &SimLimits::default(),
            7,
        );
        assert!(
            matches!(traj.outcome, Outcome::Aborted { ref reason } if reason.starts_with("malformed-assistant-message"))
        );
        assert_eq!(assistant_gw.audit().chat_calls(), 2);
    }

    #[test]
    fn assistant_tool_loop_aborts_at_the_step_cap() {
        let user_gw = Arc::new(MockGateway::new(0, 8));
        user_gw.set_default_reply("Go.");
        let assistant_gw = Arc::new(MockGateway::new(0, 8));
        assistant_gw.set_default_reply(
            "<think>loop</think><tool_call>{\"name\": \"lookup\", \"arguments\": {}}</tool_call>",
        );
        let tool_gw = Arc::new(MockGateway::new(0, 8));
        tool_gw.set_default_reply("<func_return> {\"ok\": true} </func_return>");
        let spec = spec_fixture("lookup");
        let limits = SimLimits {
            max_consecutive_tool_steps: 3,
            ..Default::default()
        };
        let traj = run_simulation(
            "traj-4",
            &trio(user_gw, assistant_gw, tool_gw),
            &intent_fixture(),
            &[&spec],
            &limits,
            7,
        );
        assert_eq!(
            traj.outcome,
            Outcome::Aborted {
                reason: "tool-loop".into()
            }
        );
        let bound = limits.max_user_turns * (2 + 2 * limits.max_consecutive_tool_steps);
        assert!(traj.messages.len() <= bound);
    }

    #[test]
    fn tool_messages_follow_assistants_with_calls_and_counts_match() {
        let user_gw = Arc::new(MockGateway::new(0, 8));
        user_gw.push_sequence(["One", "Two", "###STOP###"]);
        let assistant_gw = Arc::new(MockGateway::new(0, 8));
        assistant_gw.push_sequence([
            "<think>a</think><tool_call>{\"name\": \"lookup\", \"arguments\": {}}</tool_call><tool_call>{\"name\": \"lookup\", \"arguments\": {\"q\": \"2\"}}</tool_call>",
            "<think>b</think>Both done.",
            "<think>c</think>Nothing else needed.",
        ]);
        let tool_gw = Arc::new(MockGateway::new(0, 8));
        tool_gw.set_default_reply("<func_return> {\"ok\": true} </func_return>");
        let spec = spec_fixture("lookup");
        let traj = run_simulation(
            "traj-5",
            &trio(user_gw, assistant_gw, tool_gw),
            &intent_fixture(),
            &[&spec],
            &SimLimits::default(),
            7,
        );
        assert_eq!(traj.outcome, Outcome::Stopped);
        let total_calls: usize = traj
            .messages
            .iter()
            .map(|m| m.assistant_tool_calls().len())
            .sum();
        let tool_messages = traj
            .messages
            .iter()
            .filter(|m| matches!(m, Message::Tool { .. }))
            .count();
        assert_eq!(total_calls, tool_messages);
        for (i, msg) in traj.messages.iter().enumerate() {
            if matches!(msg, Message::Tool { .. }) {
                let mut j = i;
                while j > 0 && matches!(traj.messages[j - 1], Message::Tool { .. }) {
                    j -= 1;
                }
                assert!(
                    j > 0,
                    "tool message at index {i} has no preceding assistant"
                );
                assert!(
                    !traj.messages[j - 1].assistant_tool_calls().is_empty(),
                    "tool message at {i} not preceded by assistant with calls"
                );
            }
        }
    }
}
