//! Distribution analytics over trajectories and samples, plus LLM-based
//! domain classification of user intents with tail grouping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gateway::{chat_strict, Agent, GatewayError, StrictOutcome};
use crate::prompts;
use crate::sampler::TrainingSample;
use crate::synthesis::{Message, Trajectory, UserIntent};
use crate::util::normalize_ws;

pub type Histogram = BTreeMap<u64, u64>;

fn mass(hist: &Histogram) -> u64 {
    hist.values().sum()
}

/// Distribution summary of a run. Every histogram's mass equals its
/// population count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub trajectory_count: u64,
    pub sample_count: u64,
    /// Messages per trajectory.
    pub trajectory_turn_counts: Histogram,
    /// User messages per trajectory.
    pub user_message_counts: Histogram,
    /// Maximal runs of (assistant-with-tool_calls → tool) steps per user
    /// turn; turns without any tool call land in bucket 0.
    pub tool_call_run_lengths: Histogram,
    /// Context length (messages) per training sample.
    pub sample_context_lengths: Histogram,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<DomainDistribution>,
}

impl StatsReport {
    /// Checks the mass invariants against the stored populations.
    pub fn masses_consistent(&self) -> bool {
        mass(&self.trajectory_turn_counts) == self.trajectory_count
            && mass(&self.user_message_counts) == self.trajectory_count
            && mass(&self.sample_context_lengths) == self.sample_count
    }
}

/// Counts the tool-call run length of each user segment in one trajectory.
fn segment_run_lengths(messages: &[Message]) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current: Option<u64> = None;
    for msg in messages {
        match msg {
            Message::User { .. } => {
                if let Some(run) = current.take() {
                    runs.push(run);
                }
                current = Some(0);
            }
            Message::Assistant { tool_calls, .. } if !tool_calls.is_empty() => {
                if let Some(run) = current.as_mut() {
                    *run += 1;
                }
            }
            _ => {}
        }
    }
    if let Some(run) = current {
        runs.push(run);
    }
    runs
}

pub fn compute_stats(trajectories: &[Trajectory], samples: &[TrainingSample]) -> StatsReport {
    let mut report = StatsReport {
        trajectory_count: trajectories.len() as u64,
        sample_count: samples.len() as u64,
        ..Default::default()
    };
    for traj in trajectories {
        *report
            .trajectory_turn_counts
            .entry(traj.messages.len() as u64)
            .or_default() += 1;
        let users = traj.messages.iter().filter(|m| m.is_user()).count() as u64;
        *report.user_message_counts.entry(users).or_default() += 1;
        for run in segment_run_lengths(&traj.messages) {
            *report.tool_call_run_lengths.entry(run).or_default() += 1;
        }
    }
    for sample in samples {
        *report
            .sample_context_lengths
            .entry(sample.messages.len() as u64)
            .or_default() += 1;
    }
    report
}

/// Share of each label among all label occurrences, with labels at or
/// below the tail threshold merged into "others".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDistribution {
    /// Raw occurrence counts before grouping.
    pub occurrences: BTreeMap<String, u64>,
    /// Post-grouping shares; they sum to 1 (up to rounding).
    pub shares: BTreeMap<String, f64>,
    /// Labels that were merged into "others".
    pub grouped: Vec<String>,
    pub total_occurrences: u64,
}

/// Tail threshold: labels with share ≤ 2% are grouped as "others".
pub const TAIL_SHARE: f64 = 0.02;

pub fn group_tail(occurrences: BTreeMap<String, u64>, threshold: f64) -> DomainDistribution {
    let total: u64 = occurrences.values().sum();
    let mut shares = BTreeMap::new();
    let mut grouped = Vec::new();
    let mut others = 0.0;
    for (label, count) in &occurrences {
        let share = if total == 0 {
            0.0
        } else {
            *count as f64 / total as f64
        };
        if share <= threshold && total > 0 {
            others += share;
            grouped.push(label.clone());
        } else {
            shares.insert(label.clone(), share);
        }
    }
    if !grouped.is_empty() {
        shares.insert("others".to_string(), others);
    }
    DomainDistribution {
        occurrences,
        shares,
        grouped,
        total_occurrences: total,
    }
}

/// Format retries for the domain prompt.
pub const DOMAIN_RETRIES: u32 = 1;

fn parse_labels(content: &str) -> Option<Vec<String>> {
    let value = crate::util::extract_json_array(content)?;
    let items = value.as_array()?;
    let mut labels = Vec::new();
    for item in items {
        let label = normalize_ws(item.as_str()?).to_lowercase();
        if label.is_empty() {
            return None;
        }
        labels.push(label);
    }
    if labels.is_empty() {
        None
    } else {
        Some(labels)
    }
}

/// Labels every intent in place (a single intent can carry multiple domain
/// labels; per-intent format errors yield the label "unclassified") and
/// returns the occurrence distribution with tail grouping.
pub fn classify_domains(
    judge: &Agent,
    intents: &mut [UserIntent],
) -> Result<DomainDistribution, GatewayError> {
    let mut occurrences: BTreeMap<String, u64> = BTreeMap::new();
    for intent in intents.iter_mut() {
        let outcome = chat_strict(
            judge,
            prompts::domain_messages(&intent.task_instruction),
            None,
            prompts::JSON_REPROMPT,
            DOMAIN_RETRIES,
            |r| parse_labels(&r.content),
        )?;
        let mut labels = match outcome {
            StrictOutcome::Parsed { value, .. } => value,
            StrictOutcome::FormatFailed { .. } => vec!["unclassified".to_string()],
        };
        // an intent contributes once per distinct label
        labels.sort();
        labels.dedup();
        for label in &labels {
            *occurrences.entry(label.clone()).or_default() += 1;
        }
        intent.domain_labels = labels;
    }
    Ok(group_tail(occurrences, TAIL_SHARE))
}
