//! Pairwise comparison of execution records and fault localization: label
//! dissimilarity, rank-biased overlap, per-class breakdowns, per-layer
//! activation and parameter diffs, localization verdicts, and timing
//! statistics.

mod stats;

pub use stats::{anova, timing_pct_diff, TimingComparison, ALPHA};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::{ExecutionRecord, ImageResult, TraceEntry};
use crate::ir::{GraphError, ModelGraph, OpKind};
use crate::opt::{self, PassId};

/// Mean-|Δ| threshold separating numerical jitter from an activation-level
/// divergence; equals the non-fast-math pass tolerance boundary.
pub const ACTIVATION_THETA: f64 = 1e-5;

/// Default rank-biased overlap persistence.
pub const RBO_P: f32 = 0.9;

#[derive(Debug)]
pub enum AnalysisError {
    /// The two records do not cover the same images.
    CorpusMismatch { detail: String },
    /// RBO persistence outside (0, 1).
    InvalidP { p: f32 },
    /// Traces do not align structurally; itself a divergence signal.
    TraceMismatch { detail: String },
    /// Parameter names or shapes cannot be mapped between the graphs.
    ParamMapMismatch { detail: String },
    /// ANOVA input with too few groups/samples or zero within-group
    /// variance.
    DegenerateGroups { detail: String },
    Graph(GraphError),
    Io(std::io::Error),
}

impl AnalysisError {
    fn corpus(detail: impl Into<String>) -> Self {
        AnalysisError::CorpusMismatch {
            detail: detail.into(),
        }
    }

    fn trace(detail: impl Into<String>) -> Self {
        AnalysisError::TraceMismatch {
            detail: detail.into(),
        }
    }

    fn params(detail: impl Into<String>) -> Self {
        AnalysisError::ParamMapMismatch {
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(detail: impl Into<String>) -> Self {
        AnalysisError::DegenerateGroups {
            detail: detail.into(),
        }
    }
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::CorpusMismatch { detail } => write!(f, "corpus mismatch: {detail}"),
            AnalysisError::InvalidP { p } => {
                write!(f, "rbo persistence must be in (0,1), got {p}")
            }
            AnalysisError::TraceMismatch { detail } => write!(f, "trace mismatch: {detail}"),
            AnalysisError::ParamMapMismatch { detail } => {
                write!(f, "parameter map mismatch: {detail}")
            }
            AnalysisError::DegenerateGroups { detail } => {
                write!(f, "degenerate groups: {detail}")
            }
            AnalysisError::Graph(e) => write!(f, "graph error: {e}"),
            AnalysisError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

impl From<GraphError> for AnalysisError {
    fn from(e: GraphError) -> Self {
        AnalysisError::Graph(e)
    }
}

impl From<std::io::Error> for AnalysisError {
    fn from(e: std::io::Error) -> Self {
        AnalysisError::Io(e)
    }
}

/// Localization verdict for one variant pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    NoDivergence,
    ParameterDivergence,
    GraphStructureDivergence,
    ActivationOnlyDivergence,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::NoDivergence => "no-divergence",
            Verdict::ParameterDivergence => "parameter-divergence",
            Verdict::GraphStructureDivergence => "graph-structure-divergence",
            Verdict::ActivationOnlyDivergence => "activation-only-divergence",
        };
        f.write_str(s)
    }
}

/// Everything localization needs about one variant.
#[derive(Debug, Clone, Copy)]
pub struct VariantPackage<'a> {
    pub graph: &'a ModelGraph,
    pub record: &'a ExecutionRecord,
}

/// Per-class disagreement tally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub label: String,
    pub affected: usize,
    pub total: usize,
    pub pct: f32,
}

/// Elementwise |Δ| statistics for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiff {
    pub layer_index: usize,
    pub node_id: usize,
    pub mean: f64,
    pub max: f64,
    pub std: f64,
}

/// |Δ| statistics over all parameter elements of a graph pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDiff {
    pub mean: f64,
    pub max: f64,
    /// Number of elements whose values differ at all.
    pub differing: usize,
}

/// Zips two records image-by-image, requiring identical image id order.
fn paired<'a>(
    a: &'a ExecutionRecord,
    b: &'a ExecutionRecord,
) -> Result<Vec<(&'a ImageResult, &'a ImageResult)>, AnalysisError> {
    if a.images.is_empty() || b.images.is_empty() {
        return Err(AnalysisError::corpus("empty execution record"));
    }
    if a.images.len() != b.images.len() {
        return Err(AnalysisError::corpus(format!(
            "record sizes differ: {} vs {}",
            a.images.len(),
            b.images.len()
        )));
    }
    a.images
        .iter()
        .zip(&b.images)
        .map(|(ia, ib)| {
            if ia.image_id != ib.image_id {
                Err(AnalysisError::corpus(format!(
                    "image ids diverge: '{}' vs '{}'",
                    ia.image_id, ib.image_id
                )))
            } else {
                Ok((ia, ib))
            }
        })
        .collect()
}

/// Percentage of corpus images whose top-1 labels disagree, in [0, 100].
pub fn compare_labels(
    a: &ExecutionRecord,
    b: &ExecutionRecord,
) -> Result<f32, AnalysisError> {
    let pairs = paired(a, b)?;
    let differing = pairs
        .iter()
        .filter(|(ia, ib)| ia.top1_index != ib.top1_index)
        .count();
    Ok(100.0 * differing as f32 / pairs.len() as f32)
}

/// Truncated rank-biased overlap at depth K = list length, with weights
/// normalized so identical rankings score exactly 1:
/// sum over d of (1-p) p^(d-1) / (1-p^K) * |a[..d] ∩ b[..d]| / d.
pub fn rbo(a: &[usize], b: &[usize], p: f32) -> Result<f32, AnalysisError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(AnalysisError::InvalidP { p });
    }
    if a.len() != b.len() || a.is_empty() {
        return Err(AnalysisError::corpus(format!(
            "rbo needs equal-length non-empty rankings, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let k = a.len();
    let p = p as f64;
    let norm = 1.0 - p.powi(k as i32);
    let mut acc = 0.0f64;
    for d in 1..=k {
        let overlap = a[..d].iter().filter(|x| b[..d].contains(x)).count();
        let agreement = overlap as f64 / d as f64;
        acc += (1.0 - p) * p.powi(d as i32 - 1) / norm * agreement;
    }
    Ok(acc as f32)
}

/// Mean RBO of the per-image top-K rankings.
pub fn mean_rbo(
    a: &ExecutionRecord,
    b: &ExecutionRecord,
    p: f32,
) -> Result<f32, AnalysisError> {
    let pairs = paired(a, b)?;
    let mut acc = 0.0f64;
    for (ia, ib) in &pairs {
        let ra: Vec<usize> = ia.topk.iter().map(|e| e.index).collect();
        let rb: Vec<usize> = ib.topk.iter().map(|e| e.index).collect();
        acc += rbo(&ra, &rb, p)? as f64;
    }
    Ok((acc / pairs.len() as f64) as f32)
}

/// Per ground-truth class, the fraction of its images with a top-1
/// disagreement; sorted descending by fraction, then by class index.
pub fn per_class_breakdown(
    a: &ExecutionRecord,
    b: &ExecutionRecord,
    ground_truth: &BTreeMap<String, usize>,
    class_labels: &[String],
) -> Result<Vec<ClassBreakdown>, AnalysisError> {
    let pairs = paired(a, b)?;
    let mut affected = vec![0usize; class_labels.len()];
    let mut total = vec![0usize; class_labels.len()];
    for (ia, ib) in &pairs {
        let class = *ground_truth.get(&ia.image_id).ok_or_else(|| {
            AnalysisError::corpus(format!("image '{}' has no ground-truth label", ia.image_id))
        })?;
        if class >= class_labels.len() {
            return Err(AnalysisError::corpus(format!(
                "class index {class} out of range for {} labels",
                class_labels.len()
            )));
        }
        total[class] += 1;
        if ia.top1_index != ib.top1_index {
            affected[class] += 1;
        }
    }
    let mut rows: Vec<ClassBreakdown> = class_labels
        .iter()
        .enumerate()
        .map(|(i, label)| ClassBreakdown {
            label: label.clone(),
            affected: affected[i],
            total: total[i],
            pct: if total[i] == 0 {
                0.0
            } else {
                100.0 * affected[i] as f32 / total[i] as f32
            },
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&i, &j| rows[j].pct.total_cmp(&rows[i].pct).then(i.cmp(&j)));
    rows = order.into_iter().map(|i| rows[i].clone()).collect();
    Ok(rows)
}

/// Elementwise |Δ| statistics per layer for two aligned traces. Alignment
/// means equal length and equal per-layer shapes; anything else is a
/// structural divergence surfaced as [`AnalysisError::TraceMismatch`].
pub fn activation_diff(
    ta: &[TraceEntry],
    tb: &[TraceEntry],
) -> Result<Vec<LayerDiff>, AnalysisError> {
    if ta.len() != tb.len() {
        return Err(AnalysisError::trace(format!(
            "trace lengths differ: {} vs {}",
            ta.len(),
            tb.len()
        )));
    }
    ta.iter()
        .zip(tb)
        .map(|(la, lb)| {
            if la.shape != lb.shape {
                return Err(AnalysisError::trace(format!(
                    "layer {} shapes differ: {:?} vs {:?}",
                    la.layer_index, la.shape, lb.shape
                )));
            }
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            let mut max = 0.0f64;
            for (&x, &y) in la.data.iter().zip(&lb.data) {
                let d = (x as f64 - y as f64).abs();
                sum += d;
                sumsq += d * d;
                max = max.max(d);
            }
            let n = la.data.len() as f64;
            let mean = sum / n;
            Ok(LayerDiff {
                layer_index: la.layer_index,
                node_id: la.node_id,
                mean,
                max,
                std: (sumsq / n - mean * mean).max(0.0).sqrt(),
            })
        })
        .collect()
}

/// |Δ| statistics over every parameter element. Requires identical
/// parameter name sets and shapes.
pub fn parameter_diff(ga: &ModelGraph, gb: &ModelGraph) -> Result<ParamDiff, AnalysisError> {
    if let Some(name) = ga.params.keys().find(|k| !gb.params.contains_key(*k)) {
        return Err(AnalysisError::params(format!(
            "parameter '{name}' missing from second graph"
        )));
    }
    if let Some(name) = gb.params.keys().find(|k| !ga.params.contains_key(*k)) {
        return Err(AnalysisError::params(format!(
            "parameter '{name}' missing from first graph"
        )));
    }
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    let mut count = 0usize;
    let mut differing = 0usize;
    for (name, ta) in &ga.params {
        let tb = &gb.params[name];
        if ta.shape() != tb.shape() {
            return Err(AnalysisError::params(format!(
                "parameter '{name}' shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = (x as f64 - y as f64).abs();
            sum += d;
            max = max.max(d);
            differing += (d > 0.0) as usize;
            count += 1;
        }
    }
    Ok(ParamDiff {
        mean: if count == 0 { 0.0 } else { sum / count as f64 },
        max,
        differing,
    })
}

/// Node-kind sequence in topo order after canonicalization, the basis for
/// structural matching. Canonicalizing first keeps benign re-expressions
/// (operand order, trivial batch-matmul forms) from reading as divergence.
fn canonical_kinds(g: &ModelGraph) -> Result<Vec<OpKind>, AnalysisError> {
    let canon = opt::apply_pass(g, PassId::CanonicalizeOps)?;
    let order = canon.topo_sort()?;
    Ok(order
        .iter()
        .map(|&id| canon.node(id).expect("topo ids exist").op)
        .collect())
}

/// True when any aligned image shows a mean activation difference above
/// [`ACTIVATION_THETA`] at any layer; falls back to final logits for
/// records captured without traces.
fn activation_divergence(
    a: &ExecutionRecord,
    b: &ExecutionRecord,
) -> Result<bool, AnalysisError> {
    for (ia, ib) in paired(a, b)? {
        let exceeded = match (&ia.trace, &ib.trace) {
            (Some(ta), Some(tb)) => activation_diff(ta, tb)?
                .iter()
                .any(|l| l.mean > ACTIVATION_THETA),
            _ => {
                let n = ia.logits.len().min(ib.logits.len()).max(1);
                let mean: f64 = ia
                    .logits
                    .iter()
                    .zip(&ib.logits)
                    .map(|(&x, &y)| (x as f64 - y as f64).abs())
                    .sum::<f64>()
                    / n as f64;
                mean > ACTIVATION_THETA
            }
        };
        if exceeded {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Fault localization decision procedure:
/// 1. structural mismatch after canonicalization -> GraphStructureDivergence;
/// 2. any parameter element differing -> ParameterDivergence;
/// 3. activation diffs above theta despite identical parameters and
///    structure -> ActivationOnlyDivergence (backend / fast-math class);
/// 4. otherwise NoDivergence.
pub fn localize(
    source: &VariantPackage<'_>,
    target: &VariantPackage<'_>,
) -> Result<Verdict, AnalysisError> {
    if canonical_kinds(source.graph)? != canonical_kinds(target.graph)? {
        return Ok(Verdict::GraphStructureDivergence);
    }
    if parameter_diff(source.graph, target.graph)?.differing > 0 {
        return Ok(Verdict::ParameterDivergence);
    }
    if activation_divergence(source.record, target.record)? {
        return Ok(Verdict::ActivationOnlyDivergence);
    }
    Ok(Verdict::NoDivergence)
}

/// Full comparison report for one variant pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub variant_a: String,
    pub variant_b: String,
    pub dissimilarity_pct: f32,
    pub mean_rbo: f32,
    pub per_class: Vec<ClassBreakdown>,
    /// Per-layer |Δ| statistics pooled over all images; empty when traces
    /// are absent or structurally divergent.
    pub per_layer: Vec<LayerDiff>,
    /// Absent when parameters cannot be mapped (structural divergence).
    pub parameter: Option<ParamDiff>,
    pub verdict: Verdict,
    /// First layer index whose pooled mean |Δ| exceeds the threshold.
    pub onset_layer: Option<usize>,
}

/// Pools per-image traces into one per-layer statistics list over every
/// element of every image. Returns None when any image lacks a trace or
/// traces do not align.
fn pooled_layer_diffs(
    a: &ExecutionRecord,
    b: &ExecutionRecord,
) -> Result<Option<Vec<LayerDiff>>, AnalysisError> {
    struct Accum {
        layer_index: usize,
        node_id: usize,
        sum: f64,
        sumsq: f64,
        max: f64,
        count: usize,
    }
    let mut accums: Vec<Accum> = Vec::new();
    for (ia, ib) in paired(a, b)? {
        let (Some(ta), Some(tb)) = (&ia.trace, &ib.trace) else {
            return Ok(None);
        };
        if ta.len() != tb.len() || ta.iter().zip(tb).any(|(x, y)| x.shape != y.shape) {
            return Ok(None);
        }
        if accums.is_empty() {
            accums = ta
                .iter()
                .map(|l| Accum {
                    layer_index: l.layer_index,
                    node_id: l.node_id,
                    sum: 0.0,
                    sumsq: 0.0,
                    max: 0.0,
                    count: 0,
                })
                .collect();
        } else if accums.len() != ta.len() {
            return Ok(None);
        }
        for (acc, (la, lb)) in accums.iter_mut().zip(ta.iter().zip(tb)) {
            for (&x, &y) in la.data.iter().zip(&lb.data) {
                let d = (x as f64 - y as f64).abs();
                acc.sum += d;
                acc.sumsq += d * d;
                acc.max = acc.max.max(d);
                acc.count += 1;
            }
        }
    }
    Ok(Some(
        accums
            .into_iter()
            .map(|acc| {
                let n = acc.count.max(1) as f64;
                let mean = acc.sum / n;
                LayerDiff {
                    layer_index: acc.layer_index,
                    node_id: acc.node_id,
                    mean,
                    max: acc.max,
                    std: (acc.sumsq / n - mean * mean).max(0.0).sqrt(),
                }
            })
            .collect(),
    ))
}

/// Assembles the full [`DiffReport`] for a variant pair. Ground-truth
/// labels come from the corpus; class names from the source graph.
pub fn diff_report(
    source: &VariantPackage<'_>,
    target: &VariantPackage<'_>,
    ground_truth: &BTreeMap<String, usize>,
    rbo_p: f32,
) -> Result<DiffReport, AnalysisError> {
    let verdict = localize(source, target)?;
    let dissimilarity_pct = compare_labels(source.record, target.record)?;
    let mean_rbo = mean_rbo(source.record, target.record, rbo_p)?;
    let per_class = per_class_breakdown(
        source.record,
        target.record,
        ground_truth,
        &source.graph.labels,
    )?;
    let per_layer = pooled_layer_diffs(source.record, target.record)?.unwrap_or_default();
    let parameter = match verdict {
        Verdict::GraphStructureDivergence => None,
        _ => Some(parameter_diff(source.graph, target.graph)?),
    };
    let onset_layer = per_layer
        .iter()
        .find(|l| l.mean > ACTIVATION_THETA)
        .map(|l| l.layer_index);
    Ok(DiffReport {
        variant_a: source.record.variant_id.clone(),
        variant_b: target.record.variant_id.clone(),
        dissimilarity_pct,
        mean_rbo,
        per_class,
        per_layer,
        parameter,
        verdict,
        onset_layer,
    })
}

/// One cell of the pairwise dissimilarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatrixCell {
    /// Dissimilarity percentage between two executed variants.
    Pct(f32),
    /// The row or column variant failed to materialize.
    Failed,
}

/// `labels_diff.csv`: per-image top-1 labels of both variants and their
/// top-K RBO.
pub fn write_labels_csv(
    path: &Path,
    a: &ExecutionRecord,
    b: &ExecutionRecord,
    p: f32,
) -> Result<(), AnalysisError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "image_id,top1_a,top1_b,rbo")?;
    for (ia, ib) in paired(a, b)? {
        let ra: Vec<usize> = ia.topk.iter().map(|e| e.index).collect();
        let rb: Vec<usize> = ib.topk.iter().map(|e| e.index).collect();
        let r = rbo(&ra, &rb, p)?;
        writeln!(
            w,
            "{},{},{},{:.6}",
            ia.image_id, ia.top1_index, ib.top1_index, r
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `layer_diff.csv`: pooled per-layer |Δ| statistics.
pub fn write_layer_csv(path: &Path, layers: &[LayerDiff]) -> Result<(), AnalysisError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "layer_index,node_id,mean,max,std")?;
    for l in layers {
        writeln!(
            w,
            "{},{},{:.9e},{:.9e},{:.9e}",
            l.layer_index, l.node_id, l.mean, l.max, l.std
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `matrix.csv`: square source x target dissimilarity matrix with `FAILED`
/// sentinel cells for variants that could not be materialized.
pub fn write_matrix_csv(
    path: &Path,
    ids: &[String],
    cells: &[Vec<MatrixCell>],
) -> Result<(), AnalysisError> {
    assert_eq!(ids.len(), cells.len(), "matrix rows must match ids");
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "variant,{}", ids.join(","))?;
    for (id, row) in ids.iter().zip(cells) {
        assert_eq!(ids.len(), row.len(), "matrix must be square");
        let rendered: Vec<String> = row
            .iter()
            .map(|c| match c {
                MatrixCell::Pct(p) => format!("{p:.2}"),
                MatrixCell::Failed => "FAILED".to_string(),
            })
            .collect();
        writeln!(w, "{id},{}", rendered.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// `report.json`: the full [`DiffReport`] list, pretty-printed.
pub fn write_reports_json(path: &Path, reports: &[DiffReport]) -> Result<(), AnalysisError> {
    let json = serde_json::to_string_pretty(reports)
        .map_err(|e| AnalysisError::corpus(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
