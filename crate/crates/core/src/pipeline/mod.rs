//! Stage orchestration: configuration, resumable JSONL artifacts, stage
//! manifests with chained input/output hashes, and the run-level CLI
//! surface.
//!
//! Every stage writes its artifact atomically (temp file + rename) and a
//! manifest recording the effective config hash, seed, input/output hashes
//! and item counts. Gateway-heavy stages keep an append-only progress log
//! so interrupted runs resume by skipping completed item ids; resuming
//! under a different config is refused.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedder::{embed_parameters, EmbedError, Embedder, EmbeddingCache};
use crate::fn_graph::{
    sample_chains, source_edges, Edge, FunctionChain, FunctionGraph, GraphConfig, GraphError,
};
use crate::gateway::{
    Agent, ChatGateway, GatewayConfig, GatewayError, HttpGateway, OfflineBackend,
};
use crate::quality::{gate_trajectory, gate_turns, AnnotatedTrajectory, FilterReport, Verdict};
use crate::sampler::{
    build_manifest, serialize_samples, split_trajectory, SampleFileEntry, SamplerError,
};
use crate::spec_model::{complete_spec, parse_corpus, FunctionSpec, Provenance, SpecError};
use crate::synthesis::{
    chain_tools, run_simulation, synthesize_intent, AgentTrio, Outcome, SimLimits, SynthesisError,
    Trajectory, UserIntent,
};
use crate::util::{self, derive_seed, sha256_hex};

pub mod stats;

use stats::{classify_domains, compute_stats, StatsReport};

pub const FUNCTIONS_FILE: &str = "functions.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const GRAPH_FILE: &str = "graph.jsonl";
pub const GRAPH_META_FILE: &str = "graph_meta.json";
pub const CHAINS_FILE: &str = "chains.jsonl";
pub const INTENTS_FILE: &str = "intents.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const ANNOTATED_FILE: &str = "annotated.jsonl";
pub const FILTER_REPORT_FILE: &str = "filter_report.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SAMPLES_META_FILE: &str = "samples_meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
pub const INTENTS_LABELED_FILE: &str = "intents_labeled.jsonl";

const STATS_CSVS: &[&str] = &[
    "stats_trajectory_turns.csv",
    "stats_user_messages.csv",
    "stats_tool_call_runs.csv",
    "stats_sample_context_lengths.csv",
    "stats_domains.csv",
];

/// Which backend serves chat and embedding requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic offline backend; the whole pipeline runs with no
    /// network access.
    Mock,
    /// OpenAI-compatible HTTP endpoints per role.
    Http,
}

/// Model binding and transport settings for one agent role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_role_tokens")]
    pub max_turn_tokens: u32,
    #[serde(default)]
    pub http: GatewayConfig,
}

fn default_model() -> String {
    "default-model".to_string()
}
fn default_temperature() -> f32 {
    0.7
}
fn default_role_tokens() -> u32 {
    2048
}

impl Default for RoleConfig {
    fn default() -> Self {
        Self {
            model: default_model(),
            temperature: default_temperature(),
            max_turn_tokens: default_role_tokens(),
            http: GatewayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RolesConfig {
    #[serde(default)]
    pub user: RoleConfig,
    #[serde(default)]
    pub assistant: RoleConfig,
    #[serde(default)]
    pub tool: RoleConfig,
    #[serde(default)]
    pub judge: RoleConfig,
    #[serde(default)]
    pub embedder: RoleConfig,
}

/// One raw tool-definition corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSpec {
    pub path: PathBuf,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    /// Vector dimension of the mock embedding backend.
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub roles: RolesConfig,
    pub inputs: Vec<InputSpec>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub limits: SimLimits,
    #[serde(default = "default_chain_count")]
    pub chain_count: usize,
    #[serde(default = "default_embed_batch")]
    pub embed_batch_size: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub resume: bool,
    /// Optional cap on the primary item count of each stage.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Directory for per-role gateway audit JSONL files.
    #[serde(default)]
    pub audit_dir: Option<PathBuf>,
    /// Manifest row tag for the synthesized samples.
    #[serde(default = "default_source_tag")]
    pub source_tag: String,
}

fn default_backend() -> BackendKind {
    BackendKind::Mock
}
fn default_embedding_dim() -> usize {
    64
}
fn default_chain_count() -> usize {
    8
}
fn default_embed_batch() -> usize {
    64
}
fn default_source_tag() -> String {
    "synthesized".to_string()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.inputs.is_empty() {
            return Err(PipelineError::Config(
                "at least one input corpus is required".into(),
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(PipelineError::Config("out_dir must be set".into()));
        }
        if self.embedding_dim == 0 {
            return Err(PipelineError::Config(
                "embedding_dim must be positive".into(),
            ));
        }
        if self.graph.walk_len_min > self.graph.walk_len_max {
            return Err(PipelineError::Config(
                "walk_len_min exceeds walk_len_max".into(),
            ));
        }
        if !self.graph.tau.is_finite() || self.graph.tau <= 0.0 {
            return Err(PipelineError::Config("tau must be > 0".into()));
        }
        Ok(())
    }

    /// Hash of the effective configuration with the `resume` flag masked
    /// out (resuming must not change run identity).
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialization");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("resume");
        }
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out_dir
            .join("manifests")
            .join(format!("{}.json", stage.name()))
    }

    fn progress_path(&self, stage: Stage) -> PathBuf {
        self.out_dir
            .join("progress")
            .join(format!("{}.jsonl", stage.name()))
    }

    fn state_path(&self, stage: Stage) -> PathBuf {
        self.out_dir
            .join("progress")
            .join(format!("{}.state.json", stage.name()))
    }

    /// Graph/walk randomness derives from the run seed; the inner
    /// `graph.rng_seed` field is treated as derived state.
    pub fn graph_config(&self) -> GraphConfig {
        let mut cfg = self.graph.clone();
        cfg.rng_seed = derive_seed(self.rng_seed, "graph");
        cfg
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage input missing: {0}")]
    StageInputMissing(PathBuf),
    #[error("refusing to resume stage '{stage}': {detail}")]
    ConfigHashMismatch { stage: String, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Normalize,
    Embed,
    Graph,
    Chains,
    Intents,
    Simulate,
    Filter,
    Split,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Normalize,
        Stage::Embed,
        Stage::Graph,
        Stage::Chains,
        Stage::Intents,
        Stage::Simulate,
        Stage::Filter,
        Stage::Split,
        Stage::Stats,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Normalize => "normalize",
            Stage::Embed => "embed",
            Stage::Graph => "graph",
            Stage::Chains => "chains",
            Stage::Intents => "intents",
            Stage::Simulate => "simulate",
            Stage::Filter => "filter",
            Stage::Split => "split",
            Stage::Stats => "stats",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// A content-addressed reference to one artifact file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> std::io::Result<ArtifactRef> {
    let bytes = fs::read(path)?;
    Ok(ArtifactRef {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Record of one completed stage run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub items_in: u64,
    pub items_out: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Resume guard persisted while a stage is in progress.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    pub config_hash: String,
    pub inputs: Vec<ArtifactRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProgressRow<T> {
    key: String,
    item: T,
}

/// Append-only per-item progress log.
struct Progress<T> {
    path: PathBuf,
    done: BTreeMap<String, T>,
}

impl<T: Serialize + DeserializeOwned> Progress<T> {
    fn open(path: &Path, resume: bool) -> std::io::Result<Self> {
        let mut done = BTreeMap::new();
        if resume && path.exists() {
            let rows: Vec<ProgressRow<T>> = util::read_jsonl(path)?;
            for row in rows {
                done.insert(row.key, row.item);
            }
        } else if path.exists() {
            fs::remove_file(path)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            done,
        })
    }

    fn get(&self, key: &str) -> Option<&T> {
        self.done.get(key)
    }

    fn record(&mut self, key: String, item: T) -> std::io::Result<()> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        let row = ProgressRow {
            key: key.clone(),
            item,
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.flush()?;
        self.done.insert(row.key, row.item);
        Ok(())
    }
}

/// The agents and embedder bound to the configured backend.
pub struct Runtime {
    pub user: Agent,
    pub assistant: Agent,
    pub tool: Agent,
    pub judge: Agent,
    pub embedder: Embedder,
}

impl Runtime {
    pub fn trio(&self) -> AgentTrio {
        AgentTrio {
            user: self.user.clone(),
            assistant: self.assistant.clone(),
            tool: self.tool.clone(),
        }
    }
}

fn agent(gateway: Arc<dyn ChatGateway>, role: &RoleConfig) -> Agent {
    Agent {
        gateway,
        model: role.model.clone(),
        temperature: role.temperature,
        max_turn_tokens: role.max_turn_tokens,
    }
}

/// Builds the per-role gateways. Mock mode shares one offline backend (and
/// one audit log); HTTP mode gives each role its own client.
pub fn build_runtime(cfg: &PipelineConfig) -> Result<Runtime, PipelineError> {
    let attach = |gw: &dyn ChatGateway, name: &str| -> Result<(), PipelineError> {
        if let Some(dir) = &cfg.audit_dir {
            fs::create_dir_all(dir)?;
            gw.audit()
                .attach_file(&dir.join(format!("audit-{name}.jsonl")))?;
        }
        Ok(())
    };
    match cfg.backend {
        BackendKind::Mock => {
            let backend = Arc::new(OfflineBackend::new(cfg.rng_seed, cfg.embedding_dim));
            attach(backend.as_ref(), "mock")?;
            let gw: Arc<dyn ChatGateway> = backend;
            Ok(Runtime {
                user: agent(gw.clone(), &cfg.roles.user),
                assistant: agent(gw.clone(), &cfg.roles.assistant),
                tool: agent(gw.clone(), &cfg.roles.tool),
                judge: agent(gw.clone(), &cfg.roles.judge),
                embedder: Embedder {
                    gateway: gw,
                    model: cfg.roles.embedder.model.clone(),
                    batch_size: cfg.embed_batch_size,
                },
            })
        }
        BackendKind::Http => {
            let build =
                |role: &RoleConfig, name: &str| -> Result<Arc<dyn ChatGateway>, PipelineError> {
                    let gw = Arc::new(HttpGateway::new(role.http.clone()));
                    attach(gw.as_ref(), name)?;
                    Ok(gw)
                };
            Ok(Runtime {
                user: agent(build(&cfg.roles.user, "user")?, &cfg.roles.user),
                assistant: agent(
                    build(&cfg.roles.assistant, "assistant")?,
                    &cfg.roles.assistant,
                ),
                tool: agent(build(&cfg.roles.tool, "tool")?, &cfg.roles.tool),
                judge: agent(build(&cfg.roles.judge, "judge")?, &cfg.roles.judge),
                embedder: Embedder {
                    gateway: build(&cfg.roles.embedder, "embedder")?,
                    model: cfg.roles.embedder.model.clone(),
                    batch_size: cfg.embed_batch_size,
                },
            })
        }
    }
}

fn stage_input_paths(stage: Stage, cfg: &PipelineConfig) -> Vec<PathBuf> {
    match stage {
        Stage::Normalize => cfg.inputs.iter().map(|i| i.path.clone()).collect(),
        Stage::Embed => vec![cfg.artifact(FUNCTIONS_FILE)],
        Stage::Graph => vec![cfg.artifact(FUNCTIONS_FILE), cfg.artifact(EMBEDDINGS_FILE)],
        Stage::Chains => vec![
            cfg.artifact(GRAPH_FILE),
            cfg.artifact(GRAPH_META_FILE),
            cfg.artifact(FUNCTIONS_FILE),
        ],
        Stage::Intents => vec![cfg.artifact(CHAINS_FILE), cfg.artifact(FUNCTIONS_FILE)],
        Stage::Simulate => vec![
            cfg.artifact(INTENTS_FILE),
            cfg.artifact(CHAINS_FILE),
            cfg.artifact(FUNCTIONS_FILE),
        ],
        Stage::Filter => vec![cfg.artifact(TRAJECTORIES_FILE)],
        Stage::Split => vec![
            cfg.artifact(TRAJECTORIES_FILE),
            cfg.artifact(ANNOTATED_FILE),
        ],
        Stage::Stats => vec![
            cfg.artifact(TRAJECTORIES_FILE),
            cfg.artifact(SAMPLES_FILE),
            cfg.artifact(INTENTS_FILE),
        ],
    }
}

fn stage_output_names(stage: Stage) -> Vec<&'static str> {
    match stage {
        Stage::Normalize => vec![FUNCTIONS_FILE],
        Stage::Embed => vec![EMBEDDINGS_FILE],
        Stage::Graph => vec![GRAPH_FILE, GRAPH_META_FILE],
        Stage::Chains => vec![CHAINS_FILE],
        Stage::Intents => vec![INTENTS_FILE],
        Stage::Simulate => vec![TRAJECTORIES_FILE],
        Stage::Filter => vec![VERDICTS_FILE, ANNOTATED_FILE, FILTER_REPORT_FILE],
        Stage::Split => vec![SAMPLES_FILE, SAMPLES_META_FILE, MANIFEST_FILE],
        Stage::Stats => {
            let mut names = vec![STATS_FILE, INTENTS_LABELED_FILE];
            names.extend_from_slice(STATS_CSVS);
            names
        }
    }
}

/// One chain row of `chains.jsonl`, with names inlined for readability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainRecord {
    pub id: String,
    pub steps: Vec<String>,
    pub names: Vec<String>,
    pub length: usize,
}

/// One row of `annotated.jsonl`: the trajectory id plus its verdict and
/// keep mask (the full trajectory stays in `trajectories.jsonl`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedRecord {
    pub trajectory: String,
    pub traj_verdict: Verdict,
    pub turn_mask: BTreeMap<usize, bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FilterProgressItem {
    auto_rejected: bool,
    verdicts: Vec<Verdict>,
    annotated: Option<AnnotatedRecord>,
}

/// Counts written alongside `samples.jsonl` for manifest verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesMeta {
    pub source: String,
    pub trajectories: u64,
    pub reported_samples: u64,
}

/// Runs one stage: input checks, resume handling, execution, atomic
/// artifact writes, and the stage manifest.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageManifest, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let config_hash = cfg.config_hash();

    let input_paths = stage_input_paths(stage, cfg);
    for path in &input_paths {
        if !path.exists() {
            return Err(PipelineError::StageInputMissing(path.clone()));
        }
    }
    let inputs: Vec<ArtifactRef> = input_paths
        .iter()
        .map(|p| hash_file(p))
        .collect::<Result<_, _>>()?;

    let manifest_path = cfg.manifest_path(stage);
    if cfg.resume {
        if manifest_path.exists() {
            let existing: StageManifest =
                serde_json::from_str(&fs::read_to_string(&manifest_path)?)
                    .map_err(|e| PipelineError::Config(format!("corrupt stage manifest: {e}")))?;
            if existing.config_hash != config_hash {
                return Err(PipelineError::ConfigHashMismatch {
                    stage: stage.name().into(),
                    detail: "stage manifest was produced under a different config".into(),
                });
            }
            let outputs_present = stage_output_names(stage)
                .iter()
                .all(|name| cfg.artifact(name).exists());
            if existing.inputs == inputs && outputs_present {
                return Ok(existing);
            }
        }
        let state_path = cfg.state_path(stage);
        if state_path.exists() {
            let state: StageState = serde_json::from_str(&fs::read_to_string(&state_path)?)
                .map_err(|e| PipelineError::Config(format!("corrupt stage state: {e}")))?;
            if state.config_hash != config_hash {
                return Err(PipelineError::ConfigHashMismatch {
                    stage: stage.name().into(),
                    detail: "partial progress was produced under a different config".into(),
                });
            }
            if state.inputs != inputs {
                return Err(PipelineError::ConfigHashMismatch {
                    stage: stage.name().into(),
                    detail: "partial progress was produced from different inputs".into(),
                });
            }
        }
    } else {
        let _ = fs::remove_file(cfg.progress_path(stage));
        let _ = fs::remove_file(cfg.state_path(stage));
    }

    util::write_json_pretty(
        &cfg.state_path(stage),
        &StageState {
            config_hash: config_hash.clone(),
            inputs: inputs.clone(),
        },
    )?;

    let runtime = build_runtime(cfg)?;
    let body = match stage {
        Stage::Normalize => stage_normalize(cfg, &runtime)?,
        Stage::Embed => stage_embed(cfg, &runtime)?,
        Stage::Graph => stage_graph(cfg, &runtime)?,
        Stage::Chains => stage_chains(cfg)?,
        Stage::Intents => stage_intents(cfg, &runtime)?,
        Stage::Simulate => stage_simulate(cfg, &runtime)?,
        Stage::Filter => stage_filter(cfg, &runtime)?,
        Stage::Split => stage_split(cfg)?,
        Stage::Stats => stage_stats(cfg, &runtime)?,
    };

    let outputs: Vec<ArtifactRef> = stage_output_names(stage)
        .iter()
        .map(|name| hash_file(&cfg.artifact(name)))
        .collect::<Result<_, _>>()?;

    let manifest = StageManifest {
        stage: stage.name().into(),
        config_hash,
        seed: cfg.rng_seed,
        inputs,
        outputs,
        items_in: body.items_in,
        items_out: body.items_out,
        duration_ms: started.elapsed().as_millis() as u64,
        flags: body.flags,
    };
    util::write_json_pretty(&manifest_path, &manifest)?;
    let _ = fs::remove_file(cfg.progress_path(stage));
    let _ = fs::remove_file(cfg.state_path(stage));
    Ok(manifest)
}

/// Runs all stages in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageManifest>, PipelineError> {
    Stage::ALL
        .iter()
        .map(|stage| run_stage(*stage, cfg))
        .collect()
}

struct StageBody {
    items_in: u64,
    items_out: u64,
    flags: Vec<String>,
}

fn apply_limit<T>(items: &mut Vec<T>, limit: Option<usize>) {
    if let Some(limit) = limit {
        items.truncate(limit);
    }
}

fn stage_normalize(cfg: &PipelineConfig, runtime: &Runtime) -> Result<StageBody, PipelineError> {
    let mut raw: Vec<(String, Provenance)> = Vec::new();
    for input in &cfg.inputs {
        let text = fs::read_to_string(&input.path)?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            raw.push((
                line.to_string(),
                Provenance {
                    source: input.source.clone(),
                    locator: format!("{}:{}", input.path.display(), lineno + 1),
                },
            ));
        }
    }
    apply_limit(&mut raw, cfg.limit);
    let items_in = raw.len() as u64;

    let (parsed, parse_failures) = parse_corpus(raw);
    let mut progress: Progress<Option<FunctionSpec>> =
        Progress::open(&cfg.progress_path(Stage::Normalize), cfg.resume)?;
    let mut dropped = parse_failures.len() as u64;

    let mut completed: BTreeMap<String, FunctionSpec> = BTreeMap::new();
    for spec in parsed {
        let item = match progress.get(&spec.id) {
            Some(item) => item.clone(),
            None => {
                let item = match complete_spec(&spec, &runtime.assistant) {
                    Ok(done) => Some(done),
                    Err(SpecError::CompletionFailed { .. }) => None,
                    Err(e) => return Err(e.into()),
                };
                progress.record(spec.id.clone(), item.clone())?;
                item
            }
        };
        match item {
            Some(done) => {
                // completion can merge previously distinct records
                completed.entry(done.id.clone()).or_insert(done);
            }
            None => dropped += 1,
        }
    }

    let specs: Vec<&FunctionSpec> = completed.values().collect();
    util::write_jsonl(&cfg.artifact(FUNCTIONS_FILE), &specs)?;
    let mut flags = Vec::new();
    if dropped > 0 {
        flags.push(format!("dropped:{dropped}"));
    }
    Ok(StageBody {
        items_in,
        items_out: specs.len() as u64,
        flags,
    })
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<FunctionSpec>, PipelineError> {
    Ok(util::read_jsonl(&cfg.artifact(FUNCTIONS_FILE))?)
}

fn stage_embed(cfg: &PipelineConfig, runtime: &Runtime) -> Result<StageBody, PipelineError> {
    let corpus = load_corpus(cfg)?;
    let cache_path = cfg.progress_path(Stage::Embed);
    if !cfg.resume && cfg.artifact(EMBEDDINGS_FILE).exists() {
        fs::remove_file(cfg.artifact(EMBEDDINGS_FILE))?;
    }
    // warm the progress cache from a previous complete artifact if present
    let mut cache = if cfg.resume && !cache_path.exists() && cfg.artifact(EMBEDDINGS_FILE).exists()
    {
        EmbeddingCache::open(&cfg.artifact(EMBEDDINGS_FILE))?
    } else {
        EmbeddingCache::open(&cache_path)?
    };
    let map = embed_parameters(&corpus, &runtime.embedder, &mut cache)?;

    // the artifact is the cache content, rewritten sorted by text hash
    #[derive(Serialize)]
    struct Row<'a> {
        text_hash: String,
        text: &'a str,
        vector: &'a [f64],
    }
    let mut rows: BTreeMap<String, (&str, &[f64])> = BTreeMap::new();
    for emb in map.values() {
        rows.insert(
            sha256_hex(emb.text.as_bytes()),
            (emb.text.as_str(), emb.vector.as_slice()),
        );
    }
    let rendered: Vec<Row> = rows
        .iter()
        .map(|(hash, (text, vector))| Row {
            text_hash: hash.clone(),
            text,
            vector,
        })
        .collect();
    util::write_jsonl(&cfg.artifact(EMBEDDINGS_FILE), &rendered)?;
    Ok(StageBody {
        items_in: corpus.len() as u64,
        items_out: map.len() as u64,
        flags: vec![],
    })
}

fn stage_graph(cfg: &PipelineConfig, runtime: &Runtime) -> Result<StageBody, PipelineError> {
    let corpus = load_corpus(cfg)?;
    let mut cache = EmbeddingCache::open(&cfg.artifact(EMBEDDINGS_FILE))?;
    let emb = embed_parameters(&corpus, &runtime.embedder, &mut cache)?;
    let graph_cfg = cfg.graph_config();

    let corpus_by_id: BTreeMap<String, &FunctionSpec> =
        corpus.iter().map(|s| (s.id.clone(), s)).collect();
    let mut progress: Progress<Vec<Edge>> =
        Progress::open(&cfg.progress_path(Stage::Graph), cfg.resume)?;

    let mut adjacency: BTreeMap<String, Vec<Edge>> = BTreeMap::new();
    for (id, spec) in &corpus_by_id {
        let edges = match progress.get(id) {
            Some(edges) => edges.clone(),
            None => {
                let edges = source_edges(spec, &corpus_by_id, &emb, &runtime.judge, &graph_cfg)?;
                progress.record(id.clone(), edges.clone())?;
                edges
            }
        };
        if !edges.is_empty() {
            adjacency.insert(id.clone(), edges);
        }
    }

    let graph = FunctionGraph {
        nodes: corpus_by_id.keys().cloned().collect(),
        adjacency,
        config: graph_cfg,
    };
    let all_edges: Vec<&Edge> = graph.all_edges().collect();
    util::write_jsonl(&cfg.artifact(GRAPH_FILE), &all_edges)?;
    util::write_json_pretty(
        &cfg.artifact(GRAPH_META_FILE),
        &serde_json::json!({
            "config": graph.config,
            "node_count": graph.nodes.len(),
            "edge_count": all_edges.len(),
            "nodes": graph.nodes,
            "seed": cfg.rng_seed,
        }),
    )?;
    Ok(StageBody {
        items_in: corpus.len() as u64,
        items_out: all_edges.len() as u64,
        flags: vec![],
    })
}

fn load_graph(cfg: &PipelineConfig) -> Result<FunctionGraph, PipelineError> {
    let meta: Value = serde_json::from_str(&fs::read_to_string(cfg.artifact(GRAPH_META_FILE))?)
        .map_err(|e| PipelineError::Config(format!("corrupt graph meta: {e}")))?;
    let nodes: Vec<String> = serde_json::from_value(meta["nodes"].clone())
        .map_err(|e| PipelineError::Config(format!("corrupt graph meta nodes: {e}")))?;
    let config: GraphConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| PipelineError::Config(format!("corrupt graph meta config: {e}")))?;
    let edges: Vec<Edge> = util::read_jsonl(&cfg.artifact(GRAPH_FILE))?;
    let mut adjacency: BTreeMap<String, Vec<Edge>> = BTreeMap::new();
    for edge in edges {
        adjacency.entry(edge.src.clone()).or_default().push(edge);
    }
    for list in adjacency.values_mut() {
        list.sort_by(|a, b| a.dst.cmp(&b.dst));
    }
    Ok(FunctionGraph {
        nodes,
        adjacency,
        config,
    })
}

fn stage_chains(cfg: &PipelineConfig) -> Result<StageBody, PipelineError> {
    let graph = load_graph(cfg)?;
    let corpus = load_corpus(cfg)?;
    let names: BTreeMap<&str, &str> = corpus
        .iter()
        .map(|s| (s.id.as_str(), s.name.as_str()))
        .collect();
    let count = cfg
        .limit
        .map_or(cfg.chain_count, |l| cfg.chain_count.min(l));
    let outcome = sample_chains(&graph, &graph.config, count)?;
    let records: Vec<ChainRecord> = outcome
        .chains
        .iter()
        .map(|c| ChainRecord {
            id: c.id.clone(),
            steps: c.steps.clone(),
            names: c
                .steps
                .iter()
                .map(|s| names.get(s.as_str()).copied().unwrap_or("?").to_string())
                .collect(),
            length: c.length,
        })
        .collect();
    util::write_jsonl(&cfg.artifact(CHAINS_FILE), &records)?;
    let mut flags = Vec::new();
    if outcome.exhausted {
        flags.push("budget_exhausted".into());
    }
    Ok(StageBody {
        items_in: count as u64,
        items_out: records.len() as u64,
        flags,
    })
}

fn load_chains(cfg: &PipelineConfig) -> Result<Vec<FunctionChain>, PipelineError> {
    let records: Vec<ChainRecord> = util::read_jsonl(&cfg.artifact(CHAINS_FILE))?;
    Ok(records
        .into_iter()
        .map(|r| FunctionChain {
            id: r.id,
            steps: r.steps,
            length: r.length,
        })
        .collect())
}

fn corpus_map(cfg: &PipelineConfig) -> Result<BTreeMap<String, FunctionSpec>, PipelineError> {
    Ok(load_corpus(cfg)?
        .into_iter()
        .map(|s| (s.id.clone(), s))
        .collect())
}

fn stage_intents(cfg: &PipelineConfig, runtime: &Runtime) -> Result<StageBody, PipelineError> {
    let mut chains = load_chains(cfg)?;
    apply_limit(&mut chains, cfg.limit);
    let corpus = corpus_map(cfg)?;
    let mut progress: Progress<Option<UserIntent>> =
        Progress::open(&cfg.progress_path(Stage::Intents), cfg.resume)?;

    let mut intents = Vec::new();
    let mut skipped = 0u64;
    for chain in &chains {
        let item = match progress.get(&chain.id) {
            Some(item) => item.clone(),
            None => {
                let item = match synthesize_intent(&runtime.assistant, chain, &corpus) {
                    Ok(intent) => Some(intent),
                    Err(SynthesisError::IntentFormat { .. }) => None,
                    Err(e) => return Err(e.into()),
                };
                progress.record(chain.id.clone(), item.clone())?;
                item
            }
        };
        match item {
            Some(intent) => intents.push(intent),
            None => skipped += 1,
        }
    }
    util::write_jsonl(&cfg.artifact(INTENTS_FILE), &intents)?;
    let mut flags = Vec::new();
    if skipped > 0 {
        flags.push(format!("skipped:{skipped}"));
    }
    Ok(StageBody {
        items_in: chains.len() as u64,
        items_out: intents.len() as u64,
        flags,
    })
}

fn stage_simulate(cfg: &PipelineConfig, runtime: &Runtime) -> Result<StageBody, PipelineError> {
    let mut intents: Vec<UserIntent> = util::read_jsonl(&cfg.artifact(INTENTS_FILE))?;
    apply_limit(&mut intents, cfg.limit);
    let chains: BTreeMap<String, FunctionChain> = load_chains(cfg)?
        .into_iter()
        .map(|c| (c.id.clone(), c))
        .collect();
    let corpus = corpus_map(cfg)?;
    let trio = runtime.trio();
    let mut progress: Progress<Trajectory> =
        Progress::open(&cfg.progress_path(Stage::Simulate), cfg.resume)?;

    let mut trajectories = Vec::new();
    for intent in &intents {
        let traj_id = intent
            .chain_ref
            .strip_prefix("chain-")
            .map(|suffix| format!("traj-{suffix}"))
            .unwrap_or_else(|| format!("traj-{}", intent.chain_ref));
        let traj = match progress.get(&traj_id) {
            Some(t) => t.clone(),
            None => {
                let chain = chains.get(&intent.chain_ref).ok_or_else(|| {
                    PipelineError::Config(format!("intent references unknown {}", intent.chain_ref))
                })?;
                let tools = chain_tools(chain, &corpus)?;
                let seed = derive_seed(cfg.rng_seed, &traj_id);
                let traj = run_simulation(&traj_id, &trio, intent, &tools, &cfg.limits, seed);
                progress.record(traj_id.clone(), traj.clone())?;
                traj
            }
        };
        trajectories.push(traj);
    }
    util::write_jsonl(&cfg.artifact(TRAJECTORIES_FILE), &trajectories)?;
    Ok(StageBody {
        items_in: intents.len() as u64,
        items_out: trajectories.len() as u64,
        flags: vec![],
    })
}

fn stage_filter(cfg: &PipelineConfig, runtime: &Runtime) -> Result<StageBody, PipelineError> {
    let mut trajectories: Vec<Trajectory> = util::read_jsonl(&cfg.artifact(TRAJECTORIES_FILE))?;
    apply_limit(&mut trajectories, cfg.limit);
    let mut progress: Progress<FilterProgressItem> =
        Progress::open(&cfg.progress_path(Stage::Filter), cfg.resume)?;

    let mut report = FilterReport {
        input: trajectories.len(),
        ..Default::default()
    };
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut annotated: Vec<AnnotatedRecord> = Vec::new();

    for traj in &trajectories {
        let item = match progress.get(&traj.id) {
            Some(item) => item,
            None => {
                let item = filter_one(traj, &runtime.judge)?;
                progress.record(traj.id.clone(), item)?;
                progress.get(&traj.id).expect("just recorded")
            }
        };
        if item.auto_rejected {
            report.auto_rejected_non_stopped += 1;
        } else if let Some(record) = &item.annotated {
            report.surviving += 1;
            report.turns_total += record.turn_mask.len();
            report.turns_masked += record.turn_mask.values().filter(|keep| !**keep).count();
            annotated.push(record.clone());
        } else {
            report.judge_rejected += 1;
        }
        verdicts.extend(item.verdicts.iter().cloned());
    }

    util::write_jsonl(&cfg.artifact(VERDICTS_FILE), &verdicts)?;
    util::write_jsonl(&cfg.artifact(ANNOTATED_FILE), &annotated)?;
    util::write_json_pretty(&cfg.artifact(FILTER_REPORT_FILE), &report)?;
    Ok(StageBody {
        items_in: report.input as u64,
        items_out: report.surviving as u64,
        flags: vec![],
    })
}

fn filter_one(traj: &Trajectory, judge: &Agent) -> Result<FilterProgressItem, PipelineError> {
    if traj.outcome != Outcome::Stopped {
        return Ok(FilterProgressItem {
            auto_rejected: true,
            verdicts: vec![],
            annotated: None,
        });
    }
    let traj_verdict = gate_trajectory(judge, traj)?;
    let mut verdicts = vec![traj_verdict.clone()];
    if traj_verdict.bit == 0 {
        return Ok(FilterProgressItem {
            auto_rejected: false,
            verdicts,
            annotated: None,
        });
    }
    let (turn_mask, turn_verdicts) = gate_turns(judge, traj)?;
    verdicts.extend(turn_verdicts);
    Ok(FilterProgressItem {
        auto_rejected: false,
        verdicts,
        annotated: Some(AnnotatedRecord {
            trajectory: traj.id.clone(),
            traj_verdict,
            turn_mask,
        }),
    })
}

fn stage_split(cfg: &PipelineConfig) -> Result<StageBody, PipelineError> {
    let trajectories: Vec<Trajectory> = util::read_jsonl(&cfg.artifact(TRAJECTORIES_FILE))?;
    let by_id: BTreeMap<String, Trajectory> = trajectories
        .into_iter()
        .map(|t| (t.id.clone(), t))
        .collect();
    let records: Vec<AnnotatedRecord> = util::read_jsonl(&cfg.artifact(ANNOTATED_FILE))?;

    let mut samples = Vec::new();
    for record in &records {
        let traj = by_id.get(&record.trajectory).ok_or_else(|| {
            PipelineError::Config(format!(
                "annotated references unknown {}",
                record.trajectory
            ))
        })?;
        let annotated = AnnotatedTrajectory {
            trajectory: traj.clone(),
            traj_verdict: record.traj_verdict.clone(),
            turn_mask: record.turn_mask.clone(),
        };
        samples.extend(split_trajectory(&annotated));
    }

    let samples_path = cfg.artifact(SAMPLES_FILE);
    let count = serialize_samples(&samples, &samples_path)?;
    let meta = SamplesMeta {
        source: cfg.source_tag.clone(),
        trajectories: records.len() as u64,
        reported_samples: count,
    };
    util::write_json_pretty(&cfg.artifact(SAMPLES_META_FILE), &meta)?;
    let manifest = build_manifest(&[SampleFileEntry {
        source: meta.source.clone(),
        path: samples_path,
        trajectories: meta.trajectories,
        reported_samples: meta.reported_samples,
    }])?;
    util::write_json_pretty(&cfg.artifact(MANIFEST_FILE), &manifest)?;
    Ok(StageBody {
        items_in: records.len() as u64,
        items_out: count,
        flags: vec![],
    })
}

fn write_histogram_csv(path: &Path, hist: &stats::Histogram) -> std::io::Result<()> {
    util::write_atomic(path, |w| {
        writeln!(w, "value,count")?;
        for (value, count) in hist {
            writeln!(w, "{value},{count}")?;
        }
        Ok(())
    })
}

fn stage_stats(cfg: &PipelineConfig, runtime: &Runtime) -> Result<StageBody, PipelineError> {
    let trajectories: Vec<Trajectory> = util::read_jsonl(&cfg.artifact(TRAJECTORIES_FILE))?;
    let samples: Vec<crate::sampler::TrainingSample> =
        util::read_jsonl(&cfg.artifact(SAMPLES_FILE))?;
    let mut intents: Vec<UserIntent> = util::read_jsonl(&cfg.artifact(INTENTS_FILE))?;

    let mut report: StatsReport = compute_stats(&trajectories, &samples);
    let domains = classify_domains(&runtime.judge, &mut intents)?;
    report.domains = Some(domains.clone());

    util::write_json_pretty(&cfg.artifact(STATS_FILE), &report)?;
    util::write_jsonl(&cfg.artifact(INTENTS_LABELED_FILE), &intents)?;

    write_histogram_csv(
        &cfg.artifact("stats_trajectory_turns.csv"),
        &report.trajectory_turn_counts,
    )?;
    write_histogram_csv(
        &cfg.artifact("stats_user_messages.csv"),
        &report.user_message_counts,
    )?;
    write_histogram_csv(
        &cfg.artifact("stats_tool_call_runs.csv"),
        &report.tool_call_run_lengths,
    )?;
    write_histogram_csv(
        &cfg.artifact("stats_sample_context_lengths.csv"),
        &report.sample_context_lengths,
    )?;
    util::write_atomic(&cfg.artifact("stats_domains.csv"), |w| {
        writeln!(w, "label,share")?;
        for (label, share) in &domains.shares {
            writeln!(w, "{label},{share}")?;
        }
        Ok(())
    })?;

    Ok(StageBody {
        items_in: trajectories.len() as u64,
        items_out: intents.len() as u64,
        flags: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config(dir: &Path) -> PipelineConfig {
        PipelineConfig {
            backend: BackendKind::Mock,
            embedding_dim: 16,
            roles: RolesConfig::default(),
            inputs: vec![InputSpec {
                path: dir.join("corpus.jsonl"),
                source: "test".into(),
            }],
            out_dir: dir.join("out"),
            graph: GraphConfig::default(),
            limits: SimLimits::default(),
            chain_count: 2,
            embed_batch_size: 8,
            rng_seed: 7,
            resume: false,
            limit: None,
            audit_dir: None,
            source_tag: "synthesized".into(),
        }
    }

    #[test]
    fn config_hash_masks_the_resume_flag_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = minimal_config(dir.path());
        let mut b = minimal_config(dir.path());
        b.resume = true;
        assert_eq!(a.config_hash(), b.config_hash());
        a.graph.tau = 0.8;
        assert_ne!(a.config_hash(), b.config_hash());
        let mut c = minimal_config(dir.path());
        c.limit = Some(3);
        assert_ne!(b.config_hash(), c.config_hash());
    }

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::from_name(stage.name()), Some(stage));
        }
        assert_eq!(Stage::from_name("bogus"), None);
    }

    #[test]
    fn missing_inputs_are_reported_per_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = minimal_config(dir.path());
        match run_stage(Stage::Normalize, &cfg) {
            Err(PipelineError::StageInputMissing(path)) => {
                assert!(path.ends_with("corpus.jsonl"));
            }
            other => panic!("expected StageInputMissing, got {other:?}"),
        }
        match run_stage(Stage::Simulate, &cfg) {
            Err(PipelineError::StageInputMissing(_)) => {}
            other => panic!("expected StageInputMissing, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_degenerate_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = minimal_config(dir.path());
        cfg.inputs.clear();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let mut cfg = minimal_config(dir.path());
        cfg.graph.walk_len_min = 30;
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let mut cfg = minimal_config(dir.path());
        cfg.graph.tau = 0.0;
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }
}
