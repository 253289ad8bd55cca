//! Parsers for the role-specific message formats: `<think>` blocks,
//! `<tool_call>` JSON blocks, and the tool simulator's `<func_return>`
//! region.

use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatReply, ToolCall};

use super::Message;

#[derive(Debug, Error)]
pub enum AssistantParseError {
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
    #[error("assistant message has neither content nor tool calls")]
    Empty,
}

#[derive(Debug, Error)]
pub enum FuncReturnError {
    #[error("expected exactly one <func_return> region, found {0}")]
    RegionCount(usize),
    #[error("unclosed <func_return> tag")]
    Unclosed,
    #[error("func_return interior is not valid JSON: {0}")]
    BadJson(String),
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const CALL_OPEN: &str = "<tool_call>";
const CALL_CLOSE: &str = "</tool_call>";
const RETURN_OPEN: &str = "<func_return>";
const RETURN_CLOSE: &str = "</func_return>";

/// Splits off the first `<think>` block. An unclosed tag swallows the rest
/// of the text as think content.
fn extract_think(text: &str) -> (String, String) {
    let Some(open) = text.find(THINK_OPEN) else {
        return (String::new(), text.to_string());
    };
    let after_open = &text[open + THINK_OPEN.len()..];
    match after_open.find(THINK_CLOSE) {
        Some(close) => {
            let think = after_open[..close].trim().to_string();
            let rest = format!(
                "{} {}",
                &text[..open],
                &after_open[close + THINK_CLOSE.len()..]
            );
            (think, rest)
        }
        None => (after_open.trim().to_string(), text[..open].to_string()),
    }
}

/// Normalizes one parsed tool-call JSON value into calls. Accepts a single
/// object or an array of objects; string-valued `arguments` are re-parsed
/// when they hold JSON.
fn calls_from_value(value: Value) -> Result<Vec<ToolCall>, AssistantParseError> {
    let items: Vec<Value> = match value {
        Value::Array(items) => items,
        other => vec![other],
    };
    let mut calls = Vec::new();
    for item in items {
        let Value::Object(mut obj) = item else {
            return Err(AssistantParseError::MalformedToolCall(
                "tool call entry is not an object".into(),
            ));
        };
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| AssistantParseError::MalformedToolCall("missing 'name'".into()))?
            .to_string();
        let arguments = match obj.remove("arguments") {
            None | Some(Value::Null) => Value::Object(serde_json::Map::new()),
            Some(Value::String(s)) => serde_json::from_str(&s).unwrap_or(Value::String(s)),
            Some(v) => v,
        };
        calls.push(ToolCall { name, arguments });
    }
    Ok(calls)
}

/// Extracts every `<tool_call>` block, returning the calls and the text
/// with the blocks removed.
fn extract_tool_calls(text: &str) -> Result<(Vec<ToolCall>, String), AssistantParseError> {
    let mut calls = Vec::new();
    let mut rest = String::new();
    let mut cursor = 0usize;
    while let Some(open_rel) = text[cursor..].find(CALL_OPEN) {
        let open = cursor + open_rel;
        rest.push_str(&text[cursor..open]);
        let body_start = open + CALL_OPEN.len();
        let close_rel = text[body_start..].find(CALL_CLOSE).ok_or_else(|| {
            AssistantParseError::MalformedToolCall("unclosed <tool_call> tag".into())
        })?;
        let body = text[body_start..body_start + close_rel].trim();
        let value: Value = serde_json::from_str(body)
            .map_err(|e| AssistantParseError::MalformedToolCall(e.to_string()))?;
        calls.extend(calls_from_value(value)?);
        cursor = body_start + close_rel + CALL_CLOSE.len();
    }
    rest.push_str(&text[cursor..]);
    Ok((calls, rest))
}

/// Parses a raw assistant reply into its think / content / tool_calls
/// decomposition. Structured tool calls returned natively by the gateway
/// take precedence over tag parsing.
pub fn parse_assistant_message(reply: &ChatReply) -> Result<Message, AssistantParseError> {
    let (think, rest) = extract_think(&reply.content);
    let (tool_calls, content) = if reply.tool_calls.is_empty() {
        extract_tool_calls(&rest)?
    } else {
        (reply.tool_calls.clone(), rest)
    };
    let content = crate::util::normalize_ws(&content);
    if content.is_empty() && tool_calls.is_empty() {
        return Err(AssistantParseError::Empty);
    }
    Ok(Message::Assistant {
        think,
        content,
        tool_calls,
    })
}

/// Parses the tool simulator's reply: exactly one `<func_return>` region
/// whose interior is valid JSON.
pub fn parse_func_return(text: &str) -> Result<Value, FuncReturnError> {
    let opens = text.matches(RETURN_OPEN).count();
    if opens == 0 {
        return Err(FuncReturnError::RegionCount(0));
    }
    if opens > 1 {
        return Err(FuncReturnError::RegionCount(opens));
    }
    let open = text.find(RETURN_OPEN).unwrap();
    let body_start = open + RETURN_OPEN.len();
    let close = text[body_start..]
        .find(RETURN_CLOSE)
        .ok_or(FuncReturnError::Unclosed)?;
    let body = text[body_start..body_start + close].trim();
    serde_json::from_str(body).map_err(|e| FuncReturnError::BadJson(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn reply(text: &str) -> ChatReply {
        ChatReply {
            content: text.to_string(),
            tool_calls: Vec::new(),
        }
    }

    #[test]
    fn think_plus_single_tool_call_and_no_content() {
        let text = "<think>The user wants stock locations; the listing tool needs no arguments.</think>\n<tool_call>\n{\"name\":\"getStockLocations\", \"arguments\":\"{}\"}\n</tool_call>";
        let msg = parse_assistant_message(&reply(text)).unwrap();
        let Message::Assistant {
            think,
            content,
            tool_calls,
        } = msg
        else {
            panic!()
        };
        assert!(think.starts_with("The user wants"));
        assert!(content.is_empty());
        assert_eq!(tool_calls.len(), 1);
        assert_eq!(tool_calls[0].name, "getStockLocations");
        assert_eq!(tool_calls[0].arguments, json!({}));
    }

    #[test]
    fn think_plus_content_and_no_tool_calls() {
        let text = "<think>Summarize the three locations.</think>\nHere are the current stock locations: Warehouse A, Store B, Distribution Center C.";
        let msg = parse_assistant_message(&reply(text)).unwrap();
        let Message::Assistant {
            think,
            content,
            tool_calls,
        } = msg
        else {
            panic!()
        };
        assert!(!think.is_empty());
        assert!(content.contains("Warehouse A"));
        assert!(tool_calls.is_empty());
    }

    #[test]
    fn bad_json_inside_tool_call_tag_is_malformed() {
        let text = "<tool_call>{bad json</tool_call>";
        assert!(matches!(
            parse_assistant_message(&reply(text)),
            Err(AssistantParseError::MalformedToolCall(_))
        ));
    }

    #[test]
    fn unclosed_tool_call_tag_is_malformed() {
        let text = "<tool_call>{\"name\": \"f\", \"arguments\": {}}";
        assert!(matches!(
            parse_assistant_message(&reply(text)),
            Err(AssistantParseError::MalformedToolCall(_))
        ));
    }

    #[test]
    fn message_with_neither_content_nor_calls_is_empty() {
        assert!(matches!(
            parse_assistant_message(&reply("<think>only thoughts</think>")),
            Err(AssistantParseError::Empty)
        ));
    }

    #[test]
    fn string_arguments_holding_json_are_reparsed() {
        let text = r#"<tool_call>{"name": "checkInventory", "arguments": "{\"product_code\": \"XYZ789\"}"}</tool_call>"#;
        let msg = parse_assistant_message(&reply(text)).unwrap();
        let Message::Assistant { tool_calls, .. } = msg else {
            panic!()
        };
        assert_eq!(tool_calls[0].arguments, json!({"product_code": "XYZ789"}));
    }

    #[test]
    fn multiple_tool_call_blocks_parse_in_order() {
        let text = "<tool_call>{\"name\": \"a\", \"arguments\": {}}</tool_call>\n<tool_call>{\"name\": \"b\", \"arguments\": {\"x\": 1}}</tool_call>";
        let msg = parse_assistant_message(&reply(text)).unwrap();
        let Message::Assistant { tool_calls, .. } = msg else {
            panic!()
        };
        assert_eq!(
            tool_calls
                .iter()
                .map(|c| c.name.as_str())
                .collect::<Vec<_>>(),
            ["a", "b"]
        );
    }

    #[test]
    fn native_tool_calls_take_precedence_over_tags() {
        let native = ChatReply {
            content: "<think>use the native call</think>".into(),
            tool_calls: vec![crate::gateway::ToolCall {
                name: "native_fn".into(),
                arguments: json!({"k": "v"}),
            }],
        };
        let msg = parse_assistant_message(&native).unwrap();
        let Message::Assistant {
            tool_calls, think, ..
        } = msg
        else {
            panic!()
        };
        assert_eq!(tool_calls.len(), 1);
        assert_eq!(tool_calls[0].name, "native_fn");
        assert_eq!(think, "use the native call");
    }

    #[test]
    fn func_return_happy_path() {
        let v =
            parse_func_return("<func_return> {\"temperature\": \"25\u{00b0}C\"} </func_return>")
                .unwrap();
        assert_eq!(v["temperature"], "25\u{00b0}C");
    }

    #[test]
    fn func_return_error_paths() {
        assert!(matches!(
            parse_func_return("no tags at all"),
            Err(FuncReturnError::RegionCount(0))
        ));
        assert!(matches!(
            parse_func_return("<func_return>{} </func_return><func_return>{}</func_return>"),
            Err(FuncReturnError::RegionCount(2))
        ));
        assert!(matches!(
            parse_func_return("<func_return> {\"a\": 1}"),
            Err(FuncReturnError::Unclosed)
        ));
        assert!(matches!(
            parse_func_return("<func_return> not json </func_return>"),
            Err(FuncReturnError::BadJson(_))
        ));
    }
}
