//! Budget-limited random walks over the function graph.
//!
//! Each chain draws a target length L uniformly from
//! {walk_len_min, …, walk_len_max}, starts at a uniformly random node with
//! remaining budget and at least one out-edge, and steps along uniformly
//! random out-edges whose destinations still have budget. Every visit
//! decrements a global per-node budget so no node dominates the sample.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FunctionGraph, GraphConfig, GraphError};
use crate::util::derive_seed;

/// An ordered list of function ids sampled by random walk. `length` counts
/// edges, i.e. `steps.len() - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionChain {
    pub id: String,
    pub steps: Vec<String>,
    pub length: usize,
}

/// Sampled chains plus whether sampling stopped early because budgets or
/// retries ran out.
#[derive(Debug, Clone)]
pub struct ChainSampleOutcome {
    pub chains: Vec<FunctionChain>,
    pub exhausted: bool,
}

/// Fresh starts allowed per chain slot before sampling stops.
pub const WALK_RETRIES: usize = 5;

enum Attempt {
    Emitted(Vec<String>),
    TooShort,
    NoEligibleStart,
}

/// Samples up to `count` chains. Walks that dead-end before reaching
/// `walk_len_min` edges are discarded (their budget refunded) and retried
/// with a fresh start up to [`WALK_RETRIES`] times.
pub fn sample_chains(
    graph: &FunctionGraph,
    cfg: &GraphConfig,
    count: usize,
) -> Result<ChainSampleOutcome, GraphError> {
    if graph.edge_count() == 0 {
        return Err(GraphError::NoEdges);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, "chains"));
    let mut budgets: BTreeMap<&str, u32> = graph
        .nodes
        .iter()
        .map(|n| (n.as_str(), cfg.node_visit_budget))
        .collect();

    let mut chains = Vec::new();
    let mut exhausted = false;
    'slots: for _ in 0..count {
        let mut attempts = 0;
        loop {
            if attempts >= WALK_RETRIES {
                exhausted = true;
                break 'slots;
            }
            attempts += 1;
            match try_walk(graph, cfg, &mut budgets, &mut rng) {
                Attempt::Emitted(steps) => {
                    let length = steps.len() - 1;
                    chains.push(FunctionChain {
                        id: format!("chain-{:05}", chains.len()),
                        steps,
                        length,
                    });
                    break;
                }
                Attempt::TooShort => continue,
                Attempt::NoEligibleStart => {
                    exhausted = true;
                    break 'slots;
                }
            }
        }
    }
    Ok(ChainSampleOutcome { chains, exhausted })
}

fn try_walk<'g>(
    graph: &'g FunctionGraph,
    cfg: &GraphConfig,
    budgets: &mut BTreeMap<&'g str, u32>,
    rng: &mut ChaCha8Rng,
) -> Attempt {
    let target_len = rng.gen_range(cfg.walk_len_min..=cfg.walk_len_max);

    let eligible: Vec<&'g str> = graph
        .nodes
        .iter()
        .map(String::as_str)
        .filter(|n| budgets[*n] > 0 && !graph.out_edges(n).is_empty())
        .collect();
    if eligible.is_empty() {
        return Attempt::NoEligibleStart;
    }
    let start = eligible[rng.gen_range(0..eligible.len())];

    let mut visits: Vec<&'g str> = Vec::with_capacity(target_len + 1);
    *budgets.get_mut(start).unwrap() -= 1;
    visits.push(start);

    let mut current = start;
    for _ in 0..target_len {
        let candidates: Vec<&'g str> = graph
            .out_edges(current)
            .iter()
            .map(|e| e.dst.as_str())
            .filter(|dst| budgets.get(dst).copied().unwrap_or(0) > 0)
            .collect();
        if candidates.is_empty() {
            break;
        }
        let next = candidates[rng.gen_range(0..candidates.len())];
        *budgets.get_mut(next).unwrap() -= 1;
        visits.push(next);
        current = next;
    }

    if visits.len() - 1 < cfg.walk_len_min {
        for node in &visits {
            *budgets.get_mut(node).unwrap() += 1;
        }
        return Attempt::TooShort;
    }
    Attempt::Emitted(visits.into_iter().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fn_graph::Edge;

    fn bare_edge(src: &str, dst: &str) -> Edge {
        Edge {
            src: src.into(),
            dst: dst.into(),
            score: Some(0.9),
            best_pair: None,
            validator: None,
            injected: false,
        }
    }

    fn graph_from_edges(nodes: &[&str], edges: &[(&str, &str)], cfg: GraphConfig) -> FunctionGraph {
        let mut adjacency: BTreeMap<String, Vec<Edge>> = BTreeMap::new();
        for (src, dst) in edges {
            adjacency
                .entry(src.to_string())
                .or_default()
                .push(bare_edge(src, dst));
        }
        for list in adjacency.values_mut() {
            list.sort_by(|a, b| a.dst.cmp(&b.dst));
        }
        FunctionGraph {
            nodes: nodes.iter().map(|n| n.to_string()).collect(),
            adjacency,
            config: cfg,
        }
    }

    #[test]
    fn forced_length_walk_on_a_cycle_visits_six_nodes() {
        let nodes = ["n0", "n1", "n2", "n3", "n4", "n5"];
        let edges: Vec<(&str, &str)> = (0..6).map(|i| (nodes[i], nodes[(i + 1) % 6])).collect();
        let cfg = GraphConfig {
            walk_len_min: 5,
            walk_len_max: 5,
            rng_seed: 1,
            ..Default::default()
        };
        let graph = graph_from_edges(&nodes, &edges, cfg.clone());
        let out = sample_chains(&graph, &cfg, 1).unwrap();
        assert_eq!(out.chains.len(), 1);
        let chain = &out.chains[0];
        assert_eq!(chain.steps.len(), 6);
        assert_eq!(chain.length, 5);
        // every consecutive pair follows the cycle
        for pair in chain.steps.windows(2) {
            assert!(
                graph.has_edge(&pair[0], &pair[1]),
                "{} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn hub_with_budget_one_appears_in_at_most_one_chain() {
        // star: hub feeds three spokes, spokes point back to the hub
        let nodes = ["hub", "s1", "s2", "s3"];
        let mut edges = Vec::new();
        for s in &nodes[1..] {
            edges.push(("hub", *s));
            edges.push((*s, "hub"));
        }
        let cfg = GraphConfig {
            walk_len_min: 1,
            walk_len_max: 2,
            node_visit_budget: 1,
            rng_seed: 5,
            ..Default::default()
        };
        let graph = graph_from_edges(&nodes, &edges, cfg.clone());
        let out = sample_chains(&graph, &cfg, 10).unwrap();
        let hub_chains = out
            .chains
            .iter()
            .filter(|c| c.steps.iter().any(|s| s == "hub"))
            .count();
        assert!(hub_chains <= 1, "hub appeared in {hub_chains} chains");
        let hub_visits: usize = out
            .chains
            .iter()
            .flat_map(|c| c.steps.iter())
            .filter(|s| *s == "hub")
            .count();
        assert!(hub_visits <= 1);
    }

    #[test]
    fn empty_graph_is_a_no_edges_error() {
        let cfg = GraphConfig::default();
        let graph = graph_from_edges(&["a", "b"], &[], cfg.clone());
        assert!(matches!(
            sample_chains(&graph, &cfg, 3),
            Err(GraphError::NoEdges)
        ));
    }

    #[test]
    fn budgets_bound_total_visits_across_all_chains() {
        // two 3-cycles joined, generous sampling
        let nodes = ["a", "b", "c", "d", "e", "f"];
        let edges = [
            ("a", "b"),
            ("b", "c"),
            ("c", "a"),
            ("c", "d"),
            ("d", "e"),
            ("e", "f"),
            ("f", "d"),
        ];
        let cfg = GraphConfig {
            walk_len_min: 2,
            walk_len_max: 4,
            node_visit_budget: 3,
            rng_seed: 9,
            ..Default::default()
        };
        let graph = graph_from_edges(&nodes, &edges, cfg.clone());
        let out = sample_chains(&graph, &cfg, 50).unwrap();
        let mut visits: BTreeMap<&str, u32> = BTreeMap::new();
        for chain in &out.chains {
            for node in &chain.steps {
                *visits.entry(node.as_str()).or_default() += 1;
            }
        }
        for (node, count) in visits {
            assert!(
                count <= cfg.node_visit_budget,
                "{node} visited {count} times"
            );
        }
        assert!(out.exhausted, "50 chains cannot fit in 6 nodes x budget 3");
    }

    #[test]
    fn sampling_is_deterministic_for_a_fixed_seed() {
        let nodes = ["n0", "n1", "n2", "n3"];
        let edges = [
            ("n0", "n1"),
            ("n1", "n2"),
            ("n2", "n3"),
            ("n3", "n0"),
            ("n1", "n0"),
        ];
        let cfg = GraphConfig {
            walk_len_min: 2,
            walk_len_max: 6,
            node_visit_budget: 5,
            rng_seed: 42,
            ..Default::default()
        };
        let graph = graph_from_edges(&nodes, &edges, cfg.clone());
        let a = sample_chains(&graph, &cfg, 4).unwrap();
        let b = sample_chains(&graph, &cfg, 4).unwrap();
        assert_eq!(a.chains, b.chains);
    }
}
