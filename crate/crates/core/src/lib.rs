//! Batch pipeline that synthesizes multi-turn tool-use training data.
//!
//! The stages, in order: normalize raw tool definitions into canonical
//! specs (completing missing parameter definitions via a chat model), embed
//! every parameter, build a directed function graph from output→input
//! parameter similarity, sample function chains by budget-limited random
//! walk, synthesize a user intent per chain, simulate three-agent
//! (user/assistant/tool) conversations, filter them with trajectory- and
//! turn-level LLM judges, and split survivors into loss-masked training
//! samples with distribution statistics.
//!
//! Every stage works against the [`gateway::ChatGateway`] trait; the
//! bundled mock and offline backends make whole runs deterministic and
//! network-free.

pub mod embedder;
pub mod fn_graph;
pub mod gateway;
pub mod pipeline;
pub mod prompts;
pub mod quality;
pub mod sampler;
pub mod spec_model;
pub mod synthesis;
pub mod util;
