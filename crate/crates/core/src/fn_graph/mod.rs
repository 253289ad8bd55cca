//! Directed function graph built from parameter embeddings.
//!
//! An edge i→j means some output of function i is semantically close to
//! some input of function j: the score is the maximum cosine similarity
//! over all output×input parameter pairs. Candidates above the threshold
//! are confirmed by an LLM validator; a seeded per-pair injection rule adds
//! extra edges (flagged `injected`) for connectivity diversity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{Direction, EmbeddingMap, ParameterKey};
use crate::gateway::{chat_strict, Agent, GatewayError, StrictOutcome};
use crate::prompts;
use crate::spec_model::FunctionSpec;
use crate::util::derive_seed;

mod walk;

pub use walk::{sample_chains, ChainSampleOutcome, FunctionChain};

/// The validator's two 0–9 scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorScores {
    pub field_transitivity: u8,
    pub intent_coherence: u8,
}

/// The best-scoring output→input parameter pairing behind an edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestPair {
    pub output: String,
    pub input: String,
}

/// One directed edge of the function graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    /// Max pairwise cosine; absent when either side has no candidate
    /// parameters (possible only on injected edges).
    pub score: Option<f64>,
    pub best_pair: Option<BestPair>,
    /// Present on threshold edges (those confirmed by the validator).
    pub validator: Option<ValidatorScores>,
    pub injected: bool,
}

/// Graph construction and walk sampling parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Similarity threshold τ; an edge candidate needs score > τ.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Validator acceptance: min of the two scores must reach this.
    #[serde(default = "default_min_validator_score")]
    pub min_validator_score: u8,
    /// Per-ordered-pair probability of injecting an edge regardless of
    /// score, bypassing threshold and validator.
    #[serde(default)]
    pub random_edge_rate: f64,
    #[serde(default = "default_walk_len_min")]
    pub walk_len_min: usize,
    #[serde(default = "default_walk_len_max")]
    pub walk_len_max: usize,
    /// Global cap on how many emitted chains may visit a node.
    #[serde(default = "default_node_visit_budget")]
    pub node_visit_budget: u32,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_tau() -> f64 {
    0.70
}
fn default_min_validator_score() -> u8 {
    6
}
fn default_walk_len_min() -> usize {
    5
}
fn default_walk_len_max() -> usize {
    20
}
fn default_node_visit_budget() -> u32 {
    10
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            min_validator_score: default_min_validator_score(),
            random_edge_rate: 0.0,
            walk_len_min: default_walk_len_min(),
            walk_len_max: default_walk_len_max(),
            node_visit_budget: default_node_visit_budget(),
            rng_seed: 0,
        }
    }
}

/// Directed graph over specs with deterministic adjacency order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionGraph {
    /// All spec ids, sorted.
    pub nodes: Vec<String>,
    /// src id → edges sorted by dst id.
    pub adjacency: BTreeMap<String, Vec<Edge>>,
    pub config: GraphConfig,
}

impl FunctionGraph {
    pub fn out_edges(&self, src: &str) -> &[Edge] {
        self.adjacency.get(src).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }

    pub fn has_edge(&self, src: &str, dst: &str) -> bool {
        self.out_edges(src).iter().any(|e| e.dst == dst)
    }

    pub fn all_edges(&self) -> impl Iterator<Item = &Edge> {
        self.adjacency.values().flatten()
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing embedding for {spec_id}/{direction:?}/{param_name}")]
    MissingEmbedding {
        spec_id: String,
        direction: Direction,
        param_name: String,
    },
    #[error("graph has no edges")]
    NoEdges,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

fn lookup<'a>(
    emb: &'a EmbeddingMap,
    spec_id: &str,
    direction: Direction,
    param_name: &str,
) -> Result<&'a [f64], GraphError> {
    let key = ParameterKey {
        spec_id: spec_id.to_string(),
        direction,
        param_name: param_name.to_string(),
    };
    emb.get(&key)
        .map(|e| e.vector.as_slice())
        .ok_or(GraphError::MissingEmbedding {
            spec_id: spec_id.to_string(),
            direction,
            param_name: param_name.to_string(),
        })
}

/// Max cosine similarity over all (src output, dst input) parameter pairs,
/// with ties broken by lexicographic (output name, input name). `None` when
/// either side has no usable parameters (including zero vectors).
pub fn edge_score(
    src: &FunctionSpec,
    dst: &FunctionSpec,
    emb: &EmbeddingMap,
) -> Result<Option<(f64, BestPair)>, GraphError> {
    let mut out_names: Vec<&str> = src.outputs.iter().map(|p| p.name.as_str()).collect();
    let mut in_names: Vec<&str> = dst.inputs.iter().map(|p| p.name.as_str()).collect();
    out_names.sort_unstable();
    in_names.sort_unstable();

    let mut best: Option<(f64, BestPair)> = None;
    for out_name in &out_names {
        let v_out = lookup(emb, &src.id, Direction::Output, out_name)?;
        for in_name in &in_names {
            let v_in = lookup(emb, &dst.id, Direction::Input, in_name)?;
            let Some(score) = cosine(v_out, v_in) else {
                continue;
            };
            let better = match &best {
                None => true,
                Some((cur, _)) => score > *cur,
            };
            if better {
                best = Some((
                    score,
                    BestPair {
                        output: out_name.to_string(),
                        input: in_name.to_string(),
                    },
                ));
            }
        }
    }
    Ok(best)
}

/// Format retries for the validator exchange.
pub const VALIDATOR_RETRIES: u32 = 1;

/// Outcome of one validator exchange.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeVerdict {
    Accepted(ValidatorScores),
    Rejected(ValidatorScores),
    /// Reply never matched the strict two-field format; treated as a
    /// rejection by callers.
    Invalid {
        last_raw: String,
    },
}

fn parse_validator_reply(content: &str) -> Option<ValidatorScores> {
    let value = crate::util::extract_json_object(content)?;
    let obj = value.as_object()?;
    if obj.len() != 2 {
        return None;
    }
    let ft = obj.get("Field transitivity")?.as_u64()?;
    let ic = obj.get("Potential user intent path coherence")?.as_u64()?;
    if ft > 9 || ic > 9 {
        return None;
    }
    Some(ValidatorScores {
        field_transitivity: ft as u8,
        intent_coherence: ic as u8,
    })
}

/// Asks the validator to score a threshold candidate. Accepted iff the
/// smaller of the two scores reaches `min_score`.
pub fn validate_edge(
    agent: &Agent,
    src: &FunctionSpec,
    dst: &FunctionSpec,
    min_score: u8,
) -> Result<EdgeVerdict, GatewayError> {
    let src_json = serde_json::to_string(&src.projection()).expect("projection");
    let dst_json = serde_json::to_string(&dst.projection()).expect("projection");
    let outcome = chat_strict(
        agent,
        prompts::edge_validator_messages(&src_json, &dst_json),
        None,
        prompts::JSON_REPROMPT,
        VALIDATOR_RETRIES,
        |reply| parse_validator_reply(&reply.content),
    )?;
    Ok(match outcome {
        StrictOutcome::Parsed { value: scores, .. } => {
            if scores.field_transitivity.min(scores.intent_coherence) >= min_score {
                EdgeVerdict::Accepted(scores)
            } else {
                EdgeVerdict::Rejected(scores)
            }
        }
        StrictOutcome::FormatFailed { last_raw, .. } => EdgeVerdict::Invalid { last_raw },
    })
}

/// Computes the outgoing edges of one source node against every other spec
/// (in sorted id order). The injection draw happens for every ordered pair
/// so edge construction is deterministic per (seed, src) regardless of
/// scores.
pub fn source_edges(
    src: &FunctionSpec,
    corpus_by_id: &BTreeMap<String, &FunctionSpec>,
    emb: &EmbeddingMap,
    validator: &Agent,
    cfg: &GraphConfig,
) -> Result<Vec<Edge>, GraphError> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &format!("edges:{}", src.id)));
    let mut edges = Vec::new();
    for (dst_id, dst) in corpus_by_id {
        if *dst_id == src.id {
            continue;
        }
        let injected = rng.gen_bool(cfg.random_edge_rate.clamp(0.0, 1.0));
        let scored = edge_score(src, dst, emb)?;
        if injected {
            let (score, best_pair) = match scored {
                Some((s, p)) => (Some(s), Some(p)),
                None => (None, None),
            };
            edges.push(Edge {
                src: src.id.clone(),
                dst: dst_id.clone(),
                score,
                best_pair,
                validator: None,
                injected: true,
            });
            continue;
        }
        let Some((score, best_pair)) = scored else {
            continue;
        };
        if score <= cfg.tau {
            continue;
        }
        match validate_edge(validator, src, dst, cfg.min_validator_score)? {
            EdgeVerdict::Accepted(scores) => edges.push(Edge {
                src: src.id.clone(),
                dst: dst_id.clone(),
                score: Some(score),
                best_pair: Some(best_pair),
                validator: Some(scores),
                injected: false,
            }),
            EdgeVerdict::Rejected(_) | EdgeVerdict::Invalid { .. } => {}
        }
    }
    Ok(edges)
}

/// Builds the full graph: every ordered pair is considered for a threshold
/// edge (score > τ, validator accepted) and independently for injection.
pub fn build_graph(
    corpus: &[FunctionSpec],
    emb: &EmbeddingMap,
    validator: &Agent,
    cfg: &GraphConfig,
) -> Result<FunctionGraph, GraphError> {
    let corpus_by_id: BTreeMap<String, &FunctionSpec> =
        corpus.iter().map(|s| (s.id.clone(), s)).collect();
    let mut adjacency = BTreeMap::new();
    for src in corpus_by_id.values() {
        let edges = source_edges(src, &corpus_by_id, emb, validator, cfg)?;
        if !edges.is_empty() {
            adjacency.insert(src.id.clone(), edges);
        }
    }
    Ok(FunctionGraph {
        nodes: corpus_by_id.keys().cloned().collect(),
        adjacency,
        config: cfg.clone(),
    })
}
