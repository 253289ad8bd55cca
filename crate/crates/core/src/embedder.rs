//! Parameter embeddings: render each parameter to its tagged text form and
//! obtain/cache the vector.
//!
//! The cache is keyed by rendered text rather than by parameter identity —
//! corpora repeat parameters like `city` constantly, and the vector depends
//! only on description and type.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatGateway, GatewayError};
use crate::spec_model::{FunctionSpec, ParameterDef};
use crate::util::sha256_hex;

/// Identifies one parameter of one spec.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParameterKey {
    pub spec_id: String,
    pub direction: Direction,
    pub param_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Input,
    Output,
}

/// A parameter's rendered text and its vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterEmbedding {
    pub key: ParameterKey,
    pub text: String,
    pub vector: Vec<f64>,
}

/// All parameter embeddings of a corpus, keyed for deterministic iteration.
pub type EmbeddingMap = BTreeMap<ParameterKey, ParameterEmbedding>;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("parameter '{param}' is missing its {field} (completion stage skipped?)")]
    MissingField { param: String, field: &'static str },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Renders a parameter as `DESC <description> TYPE <type tag>` with
/// single-space separators.
pub fn render_embedding_text(param: &ParameterDef) -> Result<String, EmbedError> {
    if param.description.is_empty() {
        return Err(EmbedError::MissingField {
            param: param.name.clone(),
            field: "description",
        });
    }
    let value_type = param
        .value_type
        .as_ref()
        .ok_or_else(|| EmbedError::MissingField {
            param: param.name.clone(),
            field: "type",
        })?;
    let tag = value_type.tag();
    if tag.is_empty() {
        return Err(EmbedError::MissingField {
            param: param.name.clone(),
            field: "type",
        });
    }
    Ok(format!("DESC {} TYPE {}", param.description, tag))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    text_hash: String,
    text: String,
    vector: Vec<f64>,
}

/// Content-addressed embedding cache with a JSONL sidecar, so interrupted
/// runs resume without re-requesting vectors.
pub struct EmbeddingCache {
    entries: HashMap<String, Vec<f64>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            entries: HashMap::new(),
            path: None,
        }
    }

    /// Opens (or creates) a cache persisted at `path`.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let records: Vec<CacheRecord> = crate::util::read_jsonl(path)?;
            for r in records {
                entries.insert(r.text, r.vector);
            }
        }
        Ok(Self {
            entries,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn get(&self, text: &str) -> Option<&Vec<f64>> {
        self.entries.get(text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a batch and appends it to the sidecar in one flush.
    pub fn insert_batch(&mut self, pairs: &[(String, Vec<f64>)]) -> std::io::Result<()> {
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut w = BufWriter::new(file);
            for (text, vector) in pairs {
                let record = CacheRecord {
                    text_hash: sha256_hex(text.as_bytes()),
                    text: text.clone(),
                    vector: vector.clone(),
                };
                serde_json::to_writer(&mut w, &record)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        for (text, vector) in pairs {
            self.entries.insert(text.clone(), vector.clone());
        }
        Ok(())
    }
}

/// Embedding endpoint bound to a model and batch size.
pub struct Embedder {
    pub gateway: Arc<dyn ChatGateway>,
    pub model: String,
    pub batch_size: usize,
}

impl Embedder {
    pub fn new(gateway: Arc<dyn ChatGateway>, model: impl Into<String>) -> Self {
        Self {
            gateway,
            model: model.into(),
            batch_size: 64,
        }
    }
}

/// Embeds every input and output parameter of every spec in the corpus.
/// Cache hits skip gateway calls; misses are requested in batches whose
/// key-to-vector association is positional.
pub fn embed_parameters(
    corpus: &[FunctionSpec],
    embedder: &Embedder,
    cache: &mut EmbeddingCache,
) -> Result<EmbeddingMap, EmbedError> {
    let mut keyed_texts: Vec<(ParameterKey, String)> = Vec::new();
    for spec in corpus {
        for (direction, params) in [
            (Direction::Input, &spec.inputs),
            (Direction::Output, &spec.outputs),
        ] {
            for param in params {
                let key = ParameterKey {
                    spec_id: spec.id.clone(),
                    direction,
                    param_name: param.name.clone(),
                };
                keyed_texts.push((key, render_embedding_text(param)?));
            }
        }
    }

    // unique cache misses, first-seen order
    let mut pending: Vec<String> = Vec::new();
    let mut seen: std::collections::HashSet<&str> = std::collections::HashSet::new();
    for (_, text) in &keyed_texts {
        if cache.get(text).is_none() && seen.insert(text.as_str()) {
            pending.push(text.clone());
        }
    }

    for batch in pending.chunks(embedder.batch_size.max(1)) {
        let vectors = embedder.gateway.embed(&embedder.model, batch)?;
        if vectors.len() != batch.len() {
            return Err(EmbedError::DimensionMismatch {
                expected: batch.len(),
                got: vectors.len(),
            });
        }
        let pairs: Vec<(String, Vec<f64>)> = batch.iter().cloned().zip(vectors).collect();
        cache.insert_batch(&pairs)?;
    }

    let mut map = EmbeddingMap::new();
    let mut dim: Option<usize> = None;
    for (key, text) in keyed_texts {
        let vector = cache
            .get(&text)
            .expect("vector present after batching")
            .clone();
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(EmbedError::DimensionMismatch {
                    expected: d,
                    got: vector.len(),
                });
            }
            _ => {}
        }
        map.insert(key.clone(), ParameterEmbedding { key, text, vector });
    }
    Ok(map)
}
