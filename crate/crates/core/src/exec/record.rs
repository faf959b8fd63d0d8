//! Execution records and their on-disk form.
//!
//! Per-image results are JSON-lines (one object per line); timing lives in a
//! separate block so functional outputs stay byte-identical across reruns.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExecError;

/// One ranked prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub index: usize,
    pub score: f32,
}

/// One captured layer activation (debug mode). Durations are kept in the
/// timing block, not here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub layer_index: usize,
    pub node_id: usize,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Per-image execution result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub top1_index: usize,
    pub topk: Vec<TopEntry>,
    pub logits: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEntry>>,
}

/// Wall-clock samples for one variant over the corpus, all in nanoseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingBlock {
    pub repeats: usize,
    pub warmup: usize,
    /// Duration of the very first inference per image, kept separately
    /// because cold runs pay one-time costs; excluded from `samples` when
    /// warmup >= 1.
    pub cold_ns: BTreeMap<String, u64>,
    /// `repeats` timed samples per image.
    pub samples: BTreeMap<String, Vec<u64>>,
    /// Per-layer durations of one traced run per image (debug mode only),
    /// in topo order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layer_ns: BTreeMap<String, Vec<u64>>,
}

/// Everything one variant produced in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionRecord {
    pub variant_id: String,
    pub images: Vec<ImageResult>,
    pub timing: TimingBlock,
}

/// Indices of the `k` largest scores, descending, ties broken by ascending
/// index.
pub fn top_k(scores: &[f32], k: usize) -> Vec<TopEntry> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|index| TopEntry {
            index,
            score: scores[index],
        })
        .collect()
}

/// First-max-wins argmax, consistent with [`top_k`]'s tie rule.
pub fn argmax(scores: &[f32]) -> usize {
    top_k(scores, 1).first().map(|e| e.index).unwrap_or(0)
}

pub fn write_jsonl(path: &Path, images: &[ImageResult]) -> Result<(), ExecError> {
    let file = std::fs::File::create(path).map_err(ExecError::io)?;
    let mut w = BufWriter::new(file);
    for image in images {
        serde_json::to_writer(&mut w, image).map_err(|e| ExecError::corpus(e.to_string()))?;
        w.write_all(b"\n").map_err(ExecError::io)?;
    }
    w.flush().map_err(ExecError::io)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ImageResult>, ExecError> {
    let file = std::fs::File::open(path).map_err(ExecError::io)?;
    let mut images = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(ExecError::io)?;
        if line.trim().is_empty() {
            continue;
        }
        let image: ImageResult = serde_json::from_str(&line).map_err(|e| {
            ExecError::corpus(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        images.push(image);
    }
    Ok(images)
}
