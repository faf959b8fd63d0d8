//! Graph execution: preprocessing, the interpreter with its two backends,
//! regular runs (labels + timing), and debug runs (per-layer traces).
//!
//! Timing discipline: the label phase may fan out across images, but every
//! timed region runs strictly serially with nothing else in flight, on a
//! monotonic clock. Functional outputs never depend on the backend, thread
//! count, or repeat index.

pub mod corpus;
pub mod record;

pub use corpus::{generate_desk_corpus, load_corpus, save_corpus, Corpus};
pub use record::{argmax, top_k, ExecutionRecord, ImageResult, TimingBlock, TopEntry, TraceEntry};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ir::{GraphError, ModelGraph, Node, OpKind};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("kernel failure at node {node}: {source}")]
    Kernel {
        node: usize,
        source: TensorError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("corpus error: {detail}")]
    Corpus { detail: String },
    #[error("preprocess std component is zero")]
    ZeroStd,
    #[error("trace budget exceeded: needs {needed_bytes} bytes, budget {budget_bytes}")]
    OutOfMemoryBudget {
        needed_bytes: usize,
        budget_bytes: usize,
    },
}

impl ExecError {
    pub(crate) fn corpus(detail: impl Into<String>) -> Self {
        ExecError::Corpus {
            detail: detail.into(),
        }
    }

    pub(crate) fn io(e: std::io::Error) -> Self {
        ExecError::Corpus {
            detail: e.to_string(),
        }
    }
}

/// Kernel selection: Reference uses the naive kernels, OptimizedLayout the
/// blocked ones. Outputs are bit-identical by the accumulation-order
/// contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Reference,
    OptimizedLayout,
}

impl Backend {
    /// Short tag used inside variant id strings.
    pub fn short(&self) -> &'static str {
        match self {
            Backend::Reference => "ref",
            Backend::OptimizedLayout => "opt",
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Reference => "reference",
            Backend::OptimizedLayout => "optimized_layout",
        })
    }
}

/// Run parameters shared by regular and debug execution.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Top-K depth kept in records.
    pub k: usize,
    /// Timed repeats per image.
    pub repeats: usize,
    /// Untimed runs before the timed ones; the first run is recorded as
    /// `cold_ns` either way.
    pub warmup: usize,
    /// Worker cap for the label phase; `None` uses the process default.
    pub threads: Option<usize>,
    /// Cap on total captured trace bytes in debug mode.
    pub trace_budget_bytes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 5,
            repeats: 10,
            warmup: 1,
            threads: None,
            trace_budget_bytes: 256 << 20,
        }
    }
}

/// Worker cap from `DELTADIFF_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var("DELTADIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Input normalization settings: nearest-neighbor resize to `size`, then
/// `(x * scale - mean[c]) / std[c]` per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub scale: f32,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub size: (usize, usize),
}

pub fn preprocess(raw: &Tensor, spec: &PreprocessSpec) -> Result<Tensor, ExecError> {
    if raw.rank() != 4 {
        return Err(ExecError::corpus(format!(
            "preprocess expects rank-4 NCHW input, got {:?}",
            raw.shape()
        )));
    }
    let [n, c, h, w] = [raw.shape()[0], raw.shape()[1], raw.shape()[2], raw.shape()[3]];
    if spec.mean.len() != c || spec.std.len() != c {
        return Err(ExecError::corpus(format!(
            "mean/std have {}/{} channels, input has {c}",
            spec.mean.len(),
            spec.std.len()
        )));
    }
    if spec.std.iter().any(|&s| s == 0.0) {
        return Err(ExecError::ZeroStd);
    }
    let (oh, ow) = spec.size;
    let x = raw.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut idx = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            let (m, s) = (spec.mean[ci], spec.std[ci]);
            for oy in 0..oh {
                let sy = oy * h / oh;
                for ox in 0..ow {
                    let sx = ox * w / ow;
                    let v = x[plane + sy * w + sx];
                    out[idx] = (v * spec.scale - m) / s;
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).map_err(|e| ExecError::corpus(e.to_string()))
}

/// Applies one node. Constant folding reuses this dispatch so compile-time
/// evaluation matches run-time evaluation bit for bit.
pub(crate) fn eval_op(
    node: &Node,
    params: &BTreeMap<String, Tensor>,
    ins: &[&Tensor],
    backend: Backend,
    fast_math: bool,
) -> Result<Tensor, TensorError> {
    let p = |i: usize| &params[&node.params[i]];
    let conv = match backend {
        Backend::Reference => tensor::conv2d,
        Backend::OptimizedLayout => tensor::conv2d_blocked,
    };
    let dense = match backend {
        Backend::Reference => tensor::dense,
        Backend::OptimizedLayout => tensor::dense_blocked,
    };
    match node.op {
        OpKind::Conv2D => {
            let bias = (node.params.len() == 2).then(|| p(1));
            conv(
                ins[0],
                p(0),
                bias,
                node.attrs.stride.expect("validated attrs"),
                node.attrs.padding.expect("validated attrs"),
            )
        }
        OpKind::FusedConvReLU => {
            let bias = (node.params.len() == 2).then(|| p(1));
            let out = conv(
                ins[0],
                p(0),
                bias,
                node.attrs.stride.expect("validated attrs"),
                node.attrs.padding.expect("validated attrs"),
            )?;
            Ok(tensor::relu(&out))
        }
        OpKind::Dense => {
            let bias = (node.params.len() == 2).then(|| p(1));
            dense(ins[0], p(0), bias)
        }
        OpKind::FusedDenseReLU => {
            let bias = (node.params.len() == 2).then(|| p(1));
            Ok(tensor::relu(&dense(ins[0], p(0), bias)?))
        }
        OpKind::BatchMatmul => tensor::batch_matmul(ins[0], ins[1]),
        OpKind::BatchNorm => tensor::batchnorm(
            ins[0],
            p(0),
            p(1),
            p(2),
            p(3),
            node.attrs.epsilon.expect("validated attrs"),
        ),
        OpKind::ReLU => Ok(tensor::relu(ins[0])),
        OpKind::Softmax => Ok(tensor::softmax(ins[0], fast_math)),
        OpKind::Add => tensor::add(ins[0], ins[1]),
        OpKind::MaxPool => tensor::maxpool(
            ins[0],
            node.attrs.kernel.expect("validated attrs"),
            node.attrs.stride.expect("validated attrs"),
            node.attrs.padding.expect("validated attrs"),
        ),
        OpKind::AvgPool => tensor::avgpool(
            ins[0],
            node.attrs.kernel.expect("validated attrs"),
            node.attrs.stride.expect("validated attrs"),
            node.attrs.padding.expect("validated attrs"),
        ),
        OpKind::GlobalAvgPool => tensor::global_avg_pool(ins[0]),
        OpKind::Reshape => {
            tensor::reshape(ins[0], node.attrs.shape.as_deref().expect("validated attrs"))
        }
        OpKind::Concat => tensor::concat(ins, node.attrs.axis.expect("validated attrs")),
        OpKind::Constant => Ok(p(0).clone()),
    }
}

fn evaluate_with(
    graph: &ModelGraph,
    image: &Tensor,
    backend: Backend,
    mut sink: impl FnMut(usize, usize, &Tensor, u64),
) -> Result<Vec<Tensor>, ExecError> {
    let declared = graph
        .inputs
        .first()
        .ok_or_else(|| ExecError::corpus("graph declares no inputs"))?;
    if graph.inputs.len() != 1 {
        return Err(ExecError::corpus("expected a single-input graph"));
    }
    if image.shape() != declared.shape.as_slice() {
        return Err(ExecError::corpus(format!(
            "input shape {:?} does not match declared {:?}",
            image.shape(),
            declared.shape
        )));
    }
    let order = graph.topo_sort()?;
    let mut values: BTreeMap<usize, Tensor> = BTreeMap::new();
    for (layer_index, &id) in order.iter().enumerate() {
        let node = graph.node(id).expect("sorted id exists");
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|r| match r {
                crate::ir::ValueRef::Input(_) => image,
                crate::ir::ValueRef::Node(src) => &values[src],
            })
            .collect();
        let started = Instant::now();
        let out = eval_op(node, &graph.params, &ins, backend, graph.fast_math)
            .map_err(|source| ExecError::Kernel { node: id, source })?;
        let elapsed = started.elapsed().as_nanos() as u64;
        sink(layer_index, id, &out, elapsed);
        values.insert(id, out);
    }
    Ok(graph
        .outputs
        .iter()
        .map(|id| values[id].clone())
        .collect())
}

/// Runs the graph on one input and returns the declared outputs.
pub fn evaluate(
    graph: &ModelGraph,
    image: &Tensor,
    backend: Backend,
) -> Result<Vec<Tensor>, ExecError> {
    evaluate_with(graph, image, backend, |_, _, _, _| {})
}

/// Single-output convenience wrapper over [`evaluate`].
pub fn backend_execute(
    graph: &ModelGraph,
    input: &Tensor,
    backend: Backend,
) -> Result<Tensor, ExecError> {
    let mut outputs = evaluate(graph, input, backend)?;
    outputs
        .pop()
        .ok_or_else(|| ExecError::corpus("graph produced no outputs"))
}

fn label_image(
    graph: &ModelGraph,
    backend: Backend,
    k: usize,
    id: &str,
    image: &Tensor,
) -> Result<ImageResult, ExecError> {
    let out = backend_execute(graph, image, backend)?;
    let logits = out.data().to_vec();
    let topk = top_k(&logits, k);
    Ok(ImageResult {
        image_id: id.to_string(),
        top1_index: argmax(&logits),
        topk,
        logits,
        trace: None,
    })
}

fn label_phase(
    graph: &ModelGraph,
    corpus: &Corpus,
    backend: Backend,
    cfg: &RunConfig,
) -> Result<Vec<ImageResult>, ExecError> {
    use rayon::prelude::*;
    let work = || {
        corpus
            .images
            .par_iter()
            .map(|(id, image)| label_image(graph, backend, cfg.k, id, image))
            .collect::<Result<Vec<_>, _>>()
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ExecError::corpus(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Serial timing sweep: per image, one cold run plus `warmup - 1` further
/// untimed runs, then `repeats` timed runs.
fn timing_phase(
    graph: &ModelGraph,
    corpus: &Corpus,
    backend: Backend,
    cfg: &RunConfig,
) -> Result<TimingBlock, ExecError> {
    let mut timing = TimingBlock {
        repeats: cfg.repeats,
        warmup: cfg.warmup,
        ..TimingBlock::default()
    };
    for (id, image) in &corpus.images {
        let mut samples = Vec::with_capacity(cfg.repeats);
        for rep in 0..cfg.warmup + cfg.repeats {
            let started = Instant::now();
            let out = evaluate(graph, image, backend)?;
            let ns = started.elapsed().as_nanos() as u64;
            std::hint::black_box(out);
            if rep == 0 {
                timing.cold_ns.insert(id.clone(), ns);
            }
            if rep >= cfg.warmup {
                samples.push(ns);
            }
        }
        timing.samples.insert(id.clone(), samples);
    }
    Ok(timing)
}

/// Regular execution: labels and logits for every corpus image, then the
/// serial timing sweep.
pub fn run_inference(
    variant_id: &str,
    graph: &ModelGraph,
    corpus: &Corpus,
    backend: Backend,
    cfg: &RunConfig,
) -> Result<ExecutionRecord, ExecError> {
    if cfg.repeats < 1 {
        return Err(ExecError::corpus("repeats must be >= 1"));
    }
    let images = label_phase(graph, corpus, backend, cfg)?;
    let timing = timing_phase(graph, corpus, backend, cfg)?;
    Ok(ExecutionRecord {
        variant_id: variant_id.to_string(),
        images,
        timing,
    })
}

/// Debug execution: every layer activation captured in topo order, with
/// per-layer durations; runs serially, then the regular timing sweep.
pub fn run_debug(
    variant_id: &str,
    graph: &ModelGraph,
    corpus: &Corpus,
    backend: Backend,
    cfg: &RunConfig,
) -> Result<ExecutionRecord, ExecError> {
    if cfg.repeats < 1 {
        return Err(ExecError::corpus("repeats must be >= 1"));
    }
    let mut images = Vec::with_capacity(corpus.images.len());
    let mut layer_ns: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut trace_bytes = 0usize;
    for (id, image) in &corpus.images {
        let mut trace = Vec::new();
        let mut durations = Vec::new();
        let outputs = evaluate_with(graph, image, backend, |layer_index, node_id, out, ns| {
            trace.push(TraceEntry {
                layer_index,
                node_id,
                shape: out.shape().to_vec(),
                data: out.data().to_vec(),
            });
            durations.push(ns);
        })?;
        trace_bytes += trace.iter().map(|t| t.data.len() * 4).sum::<usize>();
        if trace_bytes > cfg.trace_budget_bytes {
            return Err(ExecError::OutOfMemoryBudget {
                needed_bytes: trace_bytes,
                budget_bytes: cfg.trace_budget_bytes,
            });
        }
        let logits = outputs
            .last()
            .ok_or_else(|| ExecError::corpus("graph produced no outputs"))?
            .data()
            .to_vec();
        let topk = top_k(&logits, cfg.k);
        images.push(ImageResult {
            image_id: id.clone(),
            top1_index: argmax(&logits),
            topk,
            logits,
            trace: Some(trace),
        });
        layer_ns.insert(id.clone(), durations);
    }
    let mut timing = timing_phase(graph, corpus, backend, cfg)?;
    timing.layer_ns = layer_ns;
    Ok(ExecutionRecord {
        variant_id: variant_id.to_string(),
        images,
        timing,
    })
}
