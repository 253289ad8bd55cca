//! Two-stage quality filtering: a binary trajectory-level gate, then a
//! per-assistant-turn gate producing a keep-mask.
//!
//! Non-stopped trajectories are auto-rejected before any judge call (a
//! conversation without the user's completion signal cannot pass), and any
//! format ambiguity resolves against the data point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gateway::{chat_strict, Agent, GatewayError, StrictOutcome};
use crate::prompts;
use crate::synthesis::{render_message, render_transcript, Outcome, Trajectory};

/// What a verdict is about: a whole trajectory, or one assistant message
/// (identified by its index in the trajectory's message list).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSubject {
    pub trajectory: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
}

/// A binary judge outcome with the raw model text kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub subject: VerdictSubject,
    pub bit: u8,
    pub raw_reply: String,
    pub judge_model: String,
}

/// A surviving trajectory plus its per-assistant-message keep mask, keyed
/// by message index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedTrajectory {
    pub trajectory: Trajectory,
    pub traj_verdict: Verdict,
    pub turn_mask: BTreeMap<usize, bool>,
}

/// Filtering accounting; `input = auto_rejected_non_stopped +
/// judge_rejected + surviving` always holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub auto_rejected_non_stopped: usize,
    pub judge_rejected: usize,
    pub surviving: usize,
    pub turns_total: usize,
    pub turns_masked: usize,
}

/// Format retries for judge exchanges.
pub const JUDGE_RETRIES: u32 = 1;

/// Strict verdict parse: the reply must be exactly one digit after trimming.
fn parse_digit(content: &str) -> Option<u8> {
    match content.trim() {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

fn tools_json(traj: &Trajectory) -> String {
    serde_json::to_string_pretty(&traj.tools).expect("tools serialization")
}

/// Judges a whole trajectory. Callers gate on `outcome == Stopped` first;
/// format failures come back as bit 0 with the offending reply attached.
pub fn gate_trajectory(judge: &Agent, traj: &Trajectory) -> Result<Verdict, GatewayError> {
    let messages =
        prompts::trajectory_judge_messages(&tools_json(traj), &render_transcript(&traj.messages));
    let outcome = chat_strict(
        judge,
        messages,
        None,
        prompts::DIGIT_REPROMPT,
        JUDGE_RETRIES,
        |r| parse_digit(&r.content),
    )?;
    let subject = VerdictSubject {
        trajectory: traj.id.clone(),
        turn: None,
    };
    Ok(match outcome {
        StrictOutcome::Parsed { value, raw, .. } => Verdict {
            subject,
            bit: value,
            raw_reply: raw,
            judge_model: judge.model.clone(),
        },
        StrictOutcome::FormatFailed { last_raw, .. } => Verdict {
            subject,
            bit: 0,
            raw_reply: last_raw,
            judge_model: judge.model.clone(),
        },
    })
}

/// Judges every assistant message independently. The prompt's history is
/// all messages strictly before the judged one; a per-turn format failure
/// masks that turn out.
pub fn gate_turns(
    judge: &Agent,
    traj: &Trajectory,
) -> Result<(BTreeMap<usize, bool>, Vec<Verdict>), GatewayError> {
    let tools = tools_json(traj);
    let mut mask = BTreeMap::new();
    let mut verdicts = Vec::new();
    for (index, message) in traj.messages.iter().enumerate() {
        if !message.is_assistant() {
            continue;
        }
        let history = render_transcript(&traj.messages[..index]);
        let response = render_message(message);
        let outcome = chat_strict(
            judge,
            prompts::turn_judge_messages(&tools, &history, &response),
            None,
            prompts::DIGIT_REPROMPT,
            JUDGE_RETRIES,
            |r| parse_digit(&r.content),
        )?;
        let subject = VerdictSubject {
            trajectory: traj.id.clone(),
            turn: Some(index),
        };
        let verdict = match outcome {
            StrictOutcome::Parsed { value, raw, .. } => Verdict {
                subject,
                bit: value,
                raw_reply: raw,
                judge_model: judge.model.clone(),
            },
            StrictOutcome::FormatFailed { last_raw, .. } => Verdict {
                subject,
                bit: 0,
                raw_reply: last_raw,
                judge_model: judge.model.clone(),
            },
        };
        mask.insert(index, verdict.bit == 1);
        verdicts.push(verdict);
    }
    Ok((mask, verdicts))
}

/// Everything the filtering stage produces.
pub struct QualityOutcome {
    pub annotated: Vec<AnnotatedTrajectory>,
    pub report: FilterReport,
    /// Every judge verdict issued, trajectory- and turn-level.
    pub verdicts: Vec<Verdict>,
}

/// Runs both gates over a pool. Non-stopped trajectories are auto-rejected
/// with zero judge calls; judge-rejected trajectories are discarded
/// wholesale (empty mask, no annotation); survivors carry their masks.
pub fn apply_quality(pool: &[Trajectory], judge: &Agent) -> Result<QualityOutcome, GatewayError> {
    let mut report = FilterReport {
        input: pool.len(),
        ..Default::default()
    };
    let mut annotated = Vec::new();
    let mut verdicts = Vec::new();

    for traj in pool {
        if traj.outcome != Outcome::Stopped {
            report.auto_rejected_non_stopped += 1;
            continue;
        }
        let traj_verdict = gate_trajectory(judge, traj)?;
        verdicts.push(traj_verdict.clone());
        if traj_verdict.bit == 0 {
            report.judge_rejected += 1;
            continue;
        }
        let (turn_mask, turn_verdicts) = gate_turns(judge, traj)?;
        report.turns_total += turn_mask.len();
        report.turns_masked += turn_mask.values().filter(|keep| !**keep).count();
        verdicts.extend(turn_verdicts);
        report.surviving += 1;
        annotated.push(AnnotatedTrajectory {
            trajectory: traj.clone(),
            traj_verdict,
            turn_mask,
        });
    }
    Ok(QualityOutcome {
        annotated,
        report,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockGateway, ToolCall};
    use crate::synthesis::Message;
    use std::sync::Arc;

    fn judge(gw: Arc<MockGateway>) -> Agent {
        Agent {
            gateway: gw,
            model: "judge-model".into(),
            temperature: 0.0,
            max_turn_tokens: 8,
        }
    }

    pub(crate) fn trajectory(id: &str, outcome: Outcome, assistant_turns: usize) -> Trajectory {
        let mut messages = Vec::new();
        for i in 0..assistant_turns {
            messages.push(Message::User {
                content: format!("question {i}"),
            });
            messages.push(Message::Assistant {
                think: format!("think {i}"),
                content: format!("answer {i}"),
                tool_calls: vec![],
            });
        }
        Trajectory {
            id: id.into(),
            intent: crate::synthesis::UserIntent {
                chain_ref: "chain-00000".into(),
                task_instruction: "do things".into(),
                tool_usage: serde_json::Value::String("tools".into()),
                domain_labels: vec![],
            },
            tools: vec![serde_json::json!({"name": "lookup"})],
            messages,
            outcome,
            seed: 0,
        }
    }

    #[test]
    fn digit_replies_gate_keep_and_discard() {
        let traj = trajectory("t1", Outcome::Stopped, 2);
        for (reply, bit) in [("1", 1), ("0", 0)] {
            let gw = Arc::new(MockGateway::new(0, 8));
            gw.set_default_reply(reply);
            let v = gate_trajectory(&judge(gw), &traj).unwrap();
            assert_eq!(v.bit, bit);
            assert_eq!(v.raw_reply, reply);
        }
    }

    #[test]
    fn non_digit_replies_exhaust_retries_into_bit_zero() {
        let traj = trajectory("t1", Outcome::Stopped, 1);
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply("yes");
        let v = gate_trajectory(&judge(gw.clone()), &traj).unwrap();
        assert_eq!(v.bit, 0);
        assert_eq!(v.raw_reply, "yes");
        // initial attempt + one re-prompt
        assert_eq!(gw.audit().chat_calls(), (JUDGE_RETRIES + 1) as usize);
    }

    #[test]
    fn whitespace_around_the_digit_is_tolerated() {
        let traj = trajectory("t1", Outcome::Stopped, 1);
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply(" 1\n");
        assert_eq!(gate_trajectory(&judge(gw), &traj).unwrap().bit, 1);
    }

    #[test]
    fn turn_mask_keys_are_assistant_message_indices() {
        let mut traj = trajectory("t2", Outcome::Stopped, 2);
        // interleave a tool exchange so assistant indices are not contiguous
        traj.messages.insert(
            1,
            Message::Assistant {
                think: String::new(),
                content: String::new(),
                tool_calls: vec![ToolCall {
                    name: "lookup".into(),
                    arguments: serde_json::json!({}),
                }],
            },
        );
        traj.messages.insert(
            2,
            Message::Tool {
                tool_result: serde_json::json!({"ok": true}),
            },
        );
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply("1");
        let (mask, verdicts) = gate_turns(&judge(gw.clone()), &traj).unwrap();
        let expected: Vec<usize> = traj
            .messages
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_assistant())
            .map(|(i, _)| i)
            .collect();
        assert_eq!(mask.keys().copied().collect::<Vec<_>>(), expected);
        assert_eq!(verdicts.len(), expected.len());
        assert_eq!(gw.audit().chat_calls(), expected.len());
    }

    #[test]
    fn scripted_sequence_masks_exactly_the_zero_turn() {
        let traj = trajectory("t3", Outcome::Stopped, 6);
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.push_sequence(["1", "1", "0", "1", "1", "1"]);
        let (mask, _) = gate_turns(&judge(gw.clone()), &traj).unwrap();
        assert_eq!(gw.audit().chat_calls(), 6);
        let assistant_indices: Vec<usize> = mask.keys().copied().collect();
        for (ordinal, index) in assistant_indices.iter().enumerate() {
            assert_eq!(mask[index], ordinal != 2, "ordinal {ordinal} index {index}");
        }
    }

    #[test]
    fn zero_assistant_messages_means_empty_mask_and_zero_calls() {
        let mut traj = trajectory("t4", Outcome::Stopped, 0);
        traj.messages.push(Message::User {
            content: "hello".into(),
        });
        let gw = Arc::new(MockGateway::new(0, 8));
        let (mask, verdicts) = gate_turns(&judge(gw.clone()), &traj).unwrap();
        assert!(mask.is_empty());
        assert!(verdicts.is_empty());
        assert_eq!(gw.audit().chat_calls(), 0);
    }

    #[test]
    fn apply_quality_buckets_and_report_arithmetic() {
        let pool = vec![
            trajectory("t1", Outcome::Stopped, 2),
            trajectory("t2", Outcome::TurnLimit, 2),
            trajectory("t3", Outcome::Stopped, 3),
        ];
        let gw = Arc::new(MockGateway::new(0, 8));
        // t1 gate=1 then 2 turn verdicts; t2 auto-rejected; t3 gate=0
        gw.push_sequence(["1", "1", "1", "0"]);
        let out = apply_quality(&pool, &judge(gw.clone())).unwrap();
        assert_eq!(
            out.report,
            FilterReport {
                input: 3,
                auto_rejected_non_stopped: 1,
                judge_rejected: 1,
                surviving: 1,
                turns_total: 2,
                turns_masked: 0,
            }
        );
        assert_eq!(out.annotated.len(), 1);
        assert_eq!(out.annotated[0].trajectory.id, "t1");
        assert_eq!(out.verdicts.len(), 4);
        assert_eq!(gw.audit().chat_calls(), 4);
        assert_eq!(
            out.report.input,
            out.report.auto_rejected_non_stopped + out.report.judge_rejected + out.report.surviving
        );
    }

    #[test]
    fn empty_pool_yields_a_zeroed_report() {
        let gw = Arc::new(MockGateway::new(0, 8));
        let out = apply_quality(&[], &judge(gw)).unwrap();
        assert_eq!(out.report, FilterReport::default());
        assert!(out.annotated.is_empty());
    }

    #[test]
    fn all_pass_replies_survive_exactly_the_stopped_ones() {
        let pool = vec![
            trajectory("t1", Outcome::Stopped, 1),
            trajectory("t2", Outcome::Aborted { reason: "x".into() }, 1),
            trajectory("t3", Outcome::Stopped, 1),
            trajectory("t4", Outcome::TurnLimit, 1),
        ];
        let gw = Arc::new(MockGateway::new(0, 8));
        gw.set_default_reply("1");
        let out = apply_quality(&pool, &judge(gw)).unwrap();
        assert_eq!(out.report.surviving, 2);
        assert_eq!(out.report.auto_rejected_non_stopped, 2);
    }
}
