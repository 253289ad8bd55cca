//! Python bindings: the main parsing, scoring, splitting, and pipeline
//! operations, exchanged as JSON strings to keep the surface thin.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use toolforge_core::embedder;
use toolforge_core::gateway::{hash_embedding, ChatReply};
use toolforge_core::pipeline;
use toolforge_core::quality::{AnnotatedTrajectory, Verdict, VerdictSubject};
use toolforge_core::sampler;
use toolforge_core::spec_model::{self, ParameterDef, Provenance, ValueType};
use toolforge_core::synthesis::{self, Trajectory};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parse one raw tool record into a canonical function spec (JSON).
#[pyfunction]
#[pyo3(signature = (raw, source="python"))]
fn parse_function_spec(raw: &str, source: &str) -> PyResult<String> {
    let spec = spec_model::parse_function_spec(
        raw,
        Provenance {
            source: source.to_string(),
            locator: "python:0".to_string(),
        },
    )
    .map_err(value_err)?;
    serde_json::to_string(&spec).map_err(value_err)
}

/// Deterministic canonical text of a function spec (JSON in, text out).
#[pyfunction]
fn canonical_text(spec_json: &str) -> PyResult<String> {
    let spec: spec_model::FunctionSpec = serde_json::from_str(spec_json).map_err(value_err)?;
    Ok(spec_model::canonicalize(&spec))
}

/// Tagged embedding text of one parameter.
#[pyfunction]
#[pyo3(signature = (description, value_type, required=false))]
fn render_embedding_text(description: &str, value_type: &str, required: bool) -> PyResult<String> {
    let param = ParameterDef {
        name: "param".to_string(),
        description: description.to_string(),
        value_type: Some(ValueType::parse(value_type)),
        required,
    };
    embedder::render_embedding_text(&param).map_err(value_err)
}

/// Deterministic unit-norm mock embeddings for a batch of texts.
#[pyfunction]
#[pyo3(signature = (texts, seed=0, dim=64))]
fn mock_embed(texts: Vec<String>, seed: u64, dim: usize) -> Vec<Vec<f64>> {
    texts.iter().map(|t| hash_embedding(t, seed, dim)).collect()
}

/// Parse an assistant reply's think/content/tool_calls decomposition.
#[pyfunction]
fn parse_assistant_message(text: &str) -> PyResult<String> {
    let reply = ChatReply {
        content: text.to_string(),
        tool_calls: Vec::new(),
    };
    let msg = synthesis::parse_assistant_message(&reply).map_err(value_err)?;
    serde_json::to_string(&msg).map_err(value_err)
}

/// Parse a tool simulator reply: exactly one <func_return> JSON region.
#[pyfunction]
fn parse_func_return(text: &str) -> PyResult<String> {
    let value = synthesis::parse_func_return(text).map_err(value_err)?;
    serde_json::to_string(&value).map_err(value_err)
}

/// Split a trajectory (JSON) into training samples, anchoring each kept
/// assistant message. `turn_mask_json` maps message indices to keep flags.
#[pyfunction]
fn split_trajectory(trajectory_json: &str, turn_mask_json: &str) -> PyResult<String> {
    let trajectory: Trajectory = serde_json::from_str(trajectory_json).map_err(value_err)?;
    let turn_mask: std::collections::BTreeMap<usize, bool> =
        serde_json::from_str(turn_mask_json).map_err(value_err)?;
    let annotated = AnnotatedTrajectory {
        traj_verdict: Verdict {
            subject: VerdictSubject {
                trajectory: trajectory.id.clone(),
                turn: None,
            },
            bit: 1,
            raw_reply: "1".to_string(),
            judge_model: "python".to_string(),
        },
        trajectory,
        turn_mask,
    };
    serde_json::to_string(&sampler::split_trajectory(&annotated)).map_err(value_err)
}

/// Run one pipeline stage against a JSON config; returns the stage
/// manifest as JSON.
#[pyfunction]
#[pyo3(signature = (stage, config_path, resume=false, seed=None, limit=None))]
fn run_stage(
    stage: &str,
    config_path: &str,
    resume: bool,
    seed: Option<u64>,
    limit: Option<usize>,
) -> PyResult<String> {
    let stage = pipeline::Stage::from_name(stage)
        .ok_or_else(|| value_err(format!("unknown stage '{stage}'")))?;
    let mut cfg =
        pipeline::PipelineConfig::load(std::path::Path::new(config_path)).map_err(value_err)?;
    cfg.resume |= resume;
    if let Some(seed) = seed {
        cfg.rng_seed = seed;
    }
    if let Some(limit) = limit {
        cfg.limit = Some(limit);
    }
    let manifest = pipeline::run_stage(stage, &cfg).map_err(value_err)?;
    serde_json::to_string(&manifest).map_err(value_err)
}

/// Run every stage in order; returns the stage manifests as JSON.
#[pyfunction]
#[pyo3(signature = (config_path, resume=false, seed=None, limit=None))]
fn run_all(
    config_path: &str,
    resume: bool,
    seed: Option<u64>,
    limit: Option<usize>,
) -> PyResult<String> {
    let mut cfg =
        pipeline::PipelineConfig::load(std::path::Path::new(config_path)).map_err(value_err)?;
    cfg.resume |= resume;
    if let Some(seed) = seed {
        cfg.rng_seed = seed;
    }
    if let Some(limit) = limit {
        cfg.limit = Some(limit);
    }
    let manifests = pipeline::run_all(&cfg).map_err(value_err)?;
    serde_json::to_string(&manifests).map_err(value_err)
}

/// Distribution statistics over trajectory and sample JSONL files.
#[pyfunction]
fn compute_stats(trajectories_path: &str, samples_path: &str) -> PyResult<String> {
    let trajectories: Vec<Trajectory> =
        toolforge_core::util::read_jsonl(std::path::Path::new(trajectories_path))
            .map_err(value_err)?;
    let samples: Vec<sampler::TrainingSample> =
        toolforge_core::util::read_jsonl(std::path::Path::new(samples_path)).map_err(value_err)?;
    let report = pipeline::stats::compute_stats(&trajectories, &samples);
    serde_json::to_string(&report).map_err(value_err)
}

#[pymodule]
fn toolforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_function_spec, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_text, m)?)?;
    m.add_function(wrap_pyfunction!(render_embedding_text, m)?)?;
    m.add_function(wrap_pyfunction!(mock_embed, m)?)?;
    m.add_function(wrap_pyfunction!(parse_assistant_message, m)?)?;
    m.add_function(wrap_pyfunction!(parse_func_return, m)?)?;
    m.add_function(wrap_pyfunction!(split_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(compute_stats, m)?)?;
    Ok(())
}
