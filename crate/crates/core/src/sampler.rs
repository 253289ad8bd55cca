//! Splits surviving trajectories into training samples: one sample per
//! kept assistant message, carrying the full prior context and a loss
//! designation selecting exactly the anchor response.
//!
//! Masked turns never anchor a sample but stay inside later samples'
//! contexts — deleting them would break tool-message adjacency.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::quality::AnnotatedTrajectory;
use crate::synthesis::Message;
use crate::util;

/// Which tokens participate in the training objective. Structural rather
/// than token offsets: tokenization is trainer-specific.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpan {
    /// Only the anchor assistant message's think/content/tool_calls.
    AnchorOnly,
}

/// One training sample: context up to and including the anchor assistant
/// message, everything after discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub sample_id: String,
    pub source_trajectory: String,
    pub anchor_index: usize,
    pub messages: Vec<Message>,
    pub tools: Vec<Value>,
    pub loss: LossSpan,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("serialization failed: {0}")]
    Serialization(String),
    #[error(
        "manifest mismatch for '{source_tag}': reported {reported} samples, file has {actual}"
    )]
    ManifestMismatch {
        source_tag: String,
        reported: u64,
        actual: u64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One sample per assistant message with mask=true, in message order.
pub fn split_trajectory(annotated: &AnnotatedTrajectory) -> Vec<TrainingSample> {
    let traj = &annotated.trajectory;
    let mut samples = Vec::new();
    for (index, message) in traj.messages.iter().enumerate() {
        if !message.is_assistant() {
            continue;
        }
        if annotated.turn_mask.get(&index).copied() != Some(true) {
            continue;
        }
        samples.push(TrainingSample {
            sample_id: format!("{}#{:04}", traj.id, index),
            source_trajectory: traj.id.clone(),
            anchor_index: index,
            messages: traj.messages[..=index].to_vec(),
            tools: traj.tools.clone(),
            loss: LossSpan::AnchorOnly,
        });
    }
    samples
}

/// Writes samples as JSONL sorted by (source_trajectory, anchor_index).
/// Returns the record count.
pub fn serialize_samples(samples: &[TrainingSample], path: &Path) -> Result<u64, SamplerError> {
    let mut sorted: Vec<&TrainingSample> = samples.iter().collect();
    sorted.sort_by(|a, b| {
        (a.source_trajectory.as_str(), a.anchor_index)
            .cmp(&(b.source_trajectory.as_str(), b.anchor_index))
    });
    util::write_atomic(path, |w| {
        use std::io::Write;
        for sample in &sorted {
            let line = serde_json::to_string(sample)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(sorted.len() as u64)
}

/// One source's row in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub source: String,
    pub trajectories: u64,
    pub samples: u64,
}

/// Per-source accounting with totals equal to the column sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub total_trajectories: u64,
    pub total_samples: u64,
}

impl DatasetManifest {
    pub fn from_rows(rows: Vec<ManifestRow>) -> Self {
        let total_trajectories = rows.iter().map(|r| r.trajectories).sum();
        let total_samples = rows.iter().map(|r| r.samples).sum();
        Self {
            rows,
            total_trajectories,
            total_samples,
        }
    }
}

/// A sample file to be rolled into the manifest, with its self-reported
/// counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFileEntry {
    pub source: String,
    pub path: PathBuf,
    pub trajectories: u64,
    pub reported_samples: u64,
}

/// Builds the manifest from per-source sample files, verifying each file's
/// self-reported count against its actual line count.
pub fn build_manifest(entries: &[SampleFileEntry]) -> Result<DatasetManifest, SamplerError> {
    let mut rows = Vec::new();
    for entry in entries {
        let actual = util::count_lines(&entry.path)?;
        if actual != entry.reported_samples {
            return Err(SamplerError::ManifestMismatch {
                source_tag: entry.source.clone(),
                reported: entry.reported_samples,
                actual,
            });
        }
        rows.push(ManifestRow {
            source: entry.source.clone(),
            trajectories: entry.trajectories,
            samples: entry.reported_samples,
        });
    }
    Ok(DatasetManifest::from_rows(rows))
}
