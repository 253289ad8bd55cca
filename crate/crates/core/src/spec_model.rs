//! Canonical tool definitions parsed from heterogeneous JSON sources.
//!
//! Raw records arrive in the `{name, description, parameters: {type,
//! properties, required}}` shape. Parsing normalizes whitespace and type
//! tags, canonicalization gives every spec a stable content-hash id, and
//! the completion stage fills missing parameter definitions through the
//! chat gateway.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::gateway::{chat_strict, Agent, GatewayError, StrictOutcome};
use crate::prompts;
use crate::util::{normalize_ws, short_hash};

/// Closed set of parameter value types, with an escape hatch that preserves
/// unrecognized source tags verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueType {
    String,
    Float,
    Int,
    Boolean,
    Dict,
    List,
    Other(String),
}

impl ValueType {
    /// Maps a source type string onto the closed set. Common JSON-schema
    /// synonyms fold into their canonical tag; anything else is preserved.
    pub fn parse(tag: &str) -> ValueType {
        match normalize_ws(tag).to_ascii_lowercase().as_str() {
            "string" | "str" => ValueType::String,
            "float" | "number" | "double" => ValueType::Float,
            "int" | "integer" => ValueType::Int,
            "boolean" | "bool" => ValueType::Boolean,
            "dict" | "object" => ValueType::Dict,
            "list" | "array" => ValueType::List,
            _ => ValueType::Other(normalize_ws(tag)),
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            ValueType::String => "string",
            ValueType::Float => "float",
            ValueType::Int => "int",
            ValueType::Boolean => "boolean",
            ValueType::Dict => "dict",
            ValueType::List => "list",
            ValueType::Other(tag) => tag,
        }
    }
}

impl Serialize for ValueType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for ValueType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tag = String::deserialize(d)?;
        Ok(ValueType::parse(&tag))
    }
}

/// One typed, described parameter of a function's input or output space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDef {
    pub name: String,
    pub description: String,
    /// `None` until the completion stage fills it.
    #[serde(rename = "type")]
    pub value_type: Option<ValueType>,
    #[serde(default)]
    pub required: bool,
}

impl ParameterDef {
    pub fn is_complete(&self) -> bool {
        !self.description.is_empty() && self.value_type.is_some()
    }
}

/// Where a spec came from: which corpus and which record inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub locator: String,
}

/// A normalized tool definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    /// Stable content hash of the canonical text; recomputed whenever the
    /// content changes.
    pub id: String,
    pub name: String,
    pub description: String,
    pub inputs: Vec<ParameterDef>,
    pub outputs: Vec<ParameterDef>,
    pub provenance: Provenance,
    /// True when any parameter definition was model-inferred.
    pub completed: bool,
}

impl FunctionSpec {
    pub fn is_complete(&self) -> bool {
        !self.outputs.is_empty()
            && self.inputs.iter().all(ParameterDef::is_complete)
            && self.outputs.iter().all(ParameterDef::is_complete)
    }

    /// The raw-record-shaped JSON projection shown to models and stored in
    /// trajectory tool lists.
    pub fn projection(&self) -> Value {
        projection_value(self)
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("parse failure: {0}")]
    ParseFailure(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("completion failed for '{name}' after {attempts} attempts")]
    CompletionFailed { name: String, attempts: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Parses one raw tool record into a [`FunctionSpec`].
///
/// Inputs come from `parameters.properties`; `required` flags come from the
/// `required` list; outputs are empty unless the source provides them.
pub fn parse_function_spec(raw: &str, provenance: Provenance) -> Result<FunctionSpec, SpecError> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| SpecError::ParseFailure(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| SpecError::ParseFailure("record is not a JSON object".into()))?;

    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .map(normalize_ws)
        .filter(|n| !n.is_empty())
        .ok_or_else(|| SpecError::ParseFailure("missing or empty 'name'".into()))?;
    let description = obj
        .get("description")
        .and_then(Value::as_str)
        .map(normalize_ws)
        .unwrap_or_default();

    let mut inputs = Vec::new();
    if let Some(params) = obj.get("parameters").filter(|v| !v.is_null()) {
        let params = params
            .as_object()
            .ok_or_else(|| SpecError::SchemaMismatch("'parameters' is not an object".into()))?;
        if let Some(props) = params.get("properties").filter(|v| !v.is_null()) {
            let props = props
                .as_object()
                .ok_or_else(|| SpecError::SchemaMismatch("'properties' is not an object".into()))?;
            for (pname, pval) in props {
                let pobj = pval.as_object().ok_or_else(|| {
                    SpecError::SchemaMismatch(format!("property '{pname}' is not an object"))
                })?;
                inputs.push(ParameterDef {
                    name: normalize_ws(pname),
                    description: pobj
                        .get("description")
                        .and_then(Value::as_str)
                        .map(normalize_ws)
                        .unwrap_or_default(),
                    value_type: pobj
                        .get("type")
                        .and_then(Value::as_str)
                        .map(ValueType::parse),
                    required: false,
                });
            }
        }
        if let Some(required) = params.get("required").filter(|v| !v.is_null()) {
            let required = required
                .as_array()
                .ok_or_else(|| SpecError::SchemaMismatch("'required' is not an array".into()))?;
            for entry in required {
                let rname = entry.as_str().map(normalize_ws).ok_or_else(|| {
                    SpecError::SchemaMismatch("'required' entry is not a string".into())
                })?;
                let param = inputs.iter_mut().find(|p| p.name == rname).ok_or_else(|| {
                    SpecError::SchemaMismatch(format!(
                        "required parameter '{rname}' not in properties"
                    ))
                })?;
                param.required = true;
            }
        }
    }

    let outputs = match obj.get("outputs").filter(|v| !v.is_null()) {
        Some(v) => parse_output_list(v)?,
        None => Vec::new(),
    };

    let mut spec = FunctionSpec {
        id: String::new(),
        name,
        description,
        inputs,
        outputs,
        provenance,
        completed: false,
    };
    spec.id = short_hash(canonicalize(&spec).as_bytes());
    Ok(spec)
}

/// Outputs may arrive either as a `properties`-style map or as a list of
/// `{name, description, type}` objects.
fn parse_output_list(value: &Value) -> Result<Vec<ParameterDef>, SpecError> {
    let mut outputs = Vec::new();
    match value {
        Value::Object(map) => {
            for (pname, pval) in map {
                let pobj = pval.as_object().ok_or_else(|| {
                    SpecError::SchemaMismatch(format!("output '{pname}' is not an object"))
                })?;
                outputs.push(ParameterDef {
                    name: normalize_ws(pname),
                    description: pobj
                        .get("description")
                        .and_then(Value::as_str)
                        .map(normalize_ws)
                        .unwrap_or_default(),
                    value_type: pobj
                        .get("type")
                        .and_then(Value::as_str)
                        .map(ValueType::parse),
                    required: false,
                });
            }
        }
        Value::Array(items) => {
            for item in items {
                let pobj = item.as_object().ok_or_else(|| {
                    SpecError::SchemaMismatch("output entry is not an object".into())
                })?;
                let pname = pobj
                    .get("name")
                    .and_then(Value::as_str)
                    .map(normalize_ws)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| {
                        SpecError::SchemaMismatch("output entry missing 'name'".into())
                    })?;
                outputs.push(ParameterDef {
                    name: pname,
                    description: pobj
                        .get("description")
                        .and_then(Value::as_str)
                        .map(normalize_ws)
                        .unwrap_or_default(),
                    value_type: pobj
                        .get("type")
                        .and_then(Value::as_str)
                        .map(ValueType::parse),
                    required: false,
                });
            }
        }
        _ => {
            return Err(SpecError::SchemaMismatch(
                "'outputs' is neither object nor array".into(),
            ))
        }
    }
    outputs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(outputs)
}

fn param_object(param: &ParameterDef) -> Value {
    let mut obj = Map::new();
    obj.insert(
        "description".into(),
        Value::String(param.description.clone()),
    );
    if let Some(vt) = &param.value_type {
        obj.insert("type".into(), Value::String(vt.tag().to_string()));
    }
    Value::Object(obj)
}

fn projection_value(spec: &FunctionSpec) -> Value {
    let properties: Map<String, Value> = spec
        .inputs
        .iter()
        .map(|p| (p.name.clone(), param_object(p)))
        .collect();
    let required: Vec<Value> = spec
        .inputs
        .iter()
        .filter(|p| p.required)
        .map(|p| Value::String(p.name.clone()))
        .collect();
    let mut obj = Map::new();
    obj.insert("name".into(), Value::String(spec.name.clone()));
    obj.insert(
        "description".into(),
        Value::String(spec.description.clone()),
    );
    obj.insert(
        "parameters".into(),
        json!({"type": "dict", "properties": properties, "required": required}),
    );
    if !spec.outputs.is_empty() {
        let outputs: Vec<Value> = spec
            .outputs
            .iter()
            .map(|p| {
                let mut o = Map::new();
                o.insert("name".into(), Value::String(p.name.clone()));
                o.insert("description".into(), Value::String(p.description.clone()));
                if let Some(vt) = &p.value_type {
                    o.insert("type".into(), Value::String(vt.tag().to_string()));
                }
                Value::Object(o)
            })
            .collect();
        obj.insert("outputs".into(), Value::Array(outputs));
    }
    Value::Object(obj)
}

/// Deterministic serialization of a spec's content: sorted keys, normalized
/// whitespace, no id/provenance/completed metadata. Two semantically
/// identical specs produce identical text, hence identical ids.
pub fn canonicalize(spec: &FunctionSpec) -> String {
    let mut required: Vec<&str> = spec
        .inputs
        .iter()
        .filter(|p| p.required)
        .map(|p| p.name.as_str())
        .collect();
    required.sort_unstable();
    let value = projection_with_sorted_required(spec, required);
    serde_json::to_string(&value).expect("canonical serialization")
}

fn projection_with_sorted_required(spec: &FunctionSpec, required: Vec<&str>) -> Value {
    let mut value = projection_value(spec);
    value["parameters"]["required"] = Value::Array(
        required
            .into_iter()
            .map(|n| Value::String(n.to_string()))
            .collect(),
    );
    value
}

/// Refreshes `spec.id` from its current canonical text.
pub fn reassign_id(spec: &mut FunctionSpec) {
    spec.id = short_hash(canonicalize(spec).as_bytes());
}

/// Number of format retries for the completion prompts.
pub const COMPLETION_RETRIES: u32 = 2;

#[derive(Debug, Deserialize)]
struct StructureEntry {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default, rename = "type")]
    value_type: Option<String>,
}

fn parse_structure(value: &Value, key: &str) -> Option<Vec<StructureEntry>> {
    let entries: Vec<StructureEntry> = serde_json::from_value(value.get(key)?.clone()).ok()?;
    if entries.iter().all(|e| !normalize_ws(&e.name).is_empty()) {
        Some(entries)
    } else {
        None
    }
}

/// Fills missing parameter descriptions/types and empty output lists via
/// the prediction prompts. Specs that are already complete return unchanged
/// with zero gateway calls; `completed` is set iff anything was filled.
pub fn complete_spec(spec: &FunctionSpec, agent: &Agent) -> Result<FunctionSpec, SpecError> {
    let mut spec = spec.clone();
    let mut filled = false;

    if spec.inputs.iter().any(|p| !p.is_complete()) {
        filled |= complete_side(&mut spec, agent, Side::Input)?;
    }
    if spec.outputs.is_empty() || spec.outputs.iter().any(|p| !p.is_complete()) {
        filled |= complete_side(&mut spec, agent, Side::Output)?;
    }

    if filled {
        spec.completed = true;
        reassign_id(&mut spec);
    }
    Ok(spec)
}

#[derive(Clone, Copy)]
enum Side {
    Input,
    Output,
}

fn complete_side(spec: &mut FunctionSpec, agent: &Agent, side: Side) -> Result<bool, SpecError> {
    let function_json = serde_json::to_string(&spec.projection()).expect("projection");
    let (messages, structure_key) = match side {
        Side::Input => (
            prompts::complete_input_messages(&function_json),
            "input structure",
        ),
        Side::Output => (
            prompts::complete_output_messages(&function_json),
            "output structure",
        ),
    };
    let outcome = chat_strict(
        agent,
        messages,
        None,
        prompts::JSON_REPROMPT,
        COMPLETION_RETRIES,
        |reply| {
            let value = crate::util::extract_json_object(&reply.content)?;
            parse_structure(&value, structure_key)
        },
    )?;
    let (entries, _attempts) = match outcome {
        StrictOutcome::Parsed {
            value, attempts, ..
        } => (value, attempts),
        StrictOutcome::FormatFailed { attempts, .. } => {
            return Err(SpecError::CompletionFailed {
                name: spec.name.clone(),
                attempts,
            });
        }
    };

    let mut filled = false;
    match side {
        Side::Input => {
            filled |= merge_entries(&mut spec.inputs, &entries);
            if spec.inputs.iter().any(|p| !p.is_complete()) {
                return Err(SpecError::CompletionFailed {
                    name: spec.name.clone(),
                    attempts: COMPLETION_RETRIES + 1,
                });
            }
        }
        Side::Output => {
            if spec.outputs.is_empty() {
                spec.outputs = entries
                    .iter()
                    .map(|e| ParameterDef {
                        name: normalize_ws(&e.name),
                        description: normalize_ws(&e.description),
                        value_type: e.value_type.as_deref().map(ValueType::parse),
                        required: false,
                    })
                    .collect();
                spec.outputs.sort_by(|a, b| a.name.cmp(&b.name));
                filled = true;
            } else {
                filled |= merge_entries(&mut spec.outputs, &entries);
            }
            if spec.outputs.is_empty() || spec.outputs.iter().any(|p| !p.is_complete()) {
                return Err(SpecError::CompletionFailed {
                    name: spec.name.clone(),
                    attempts: COMPLETION_RETRIES + 1,
                });
            }
        }
    }
    Ok(filled)
}

/// Fills holes in existing parameters from reply entries matched by name;
/// entries that match no existing parameter are ignored.
fn merge_entries(params: &mut [ParameterDef], entries: &[StructureEntry]) -> bool {
    let by_name: BTreeMap<String, &StructureEntry> =
        entries.iter().map(|e| (normalize_ws(&e.name), e)).collect();
    let mut filled = false;
    for param in params.iter_mut() {
        let Some(entry) = by_name.get(&param.name) else {
            continue;
        };
        if param.description.is_empty() {
            let desc = normalize_ws(&entry.description);
            if !desc.is_empty() {
                param.description = desc;
                filled = true;
            }
        }
        if param.value_type.is_none() {
            if let Some(tag) = &entry.value_type {
                if !normalize_ws(tag).is_empty() {
                    param.value_type = Some(ValueType::parse(tag));
                    filled = true;
                }
            }
        }
    }
    filled
}

/// Parses every line of a raw JSONL corpus, dropping records that fail with
/// the returned error list, and dedupes by canonical id (first provenance
/// wins).
pub fn parse_corpus(
    lines: impl IntoIterator<Item = (String, Provenance)>,
) -> (Vec<FunctionSpec>, Vec<(Provenance, SpecError)>) {
    let mut by_id: BTreeMap<String, FunctionSpec> = BTreeMap::new();
    let mut failures = Vec::new();
    for (raw, provenance) in lines {
        match parse_function_spec(&raw, provenance.clone()) {
            Ok(spec) => {
                by_id.entry(spec.id.clone()).or_insert(spec);
            }
            Err(e) => failures.push((provenance, e)),
        }
    }
    (by_id.into_values().collect(), failures)
}
