//! Dataflow graph representation of a model.
//!
//! A [`ModelGraph`] is a DAG of single-output operator nodes plus named graph
//! inputs, a parameter store, and metadata (name, source dialect, class
//! labels). Graphs are immutable after validation; optimization passes build
//! new graphs rather than mutating in place.

pub mod desk;
mod manifest;

pub use manifest::{load_model, manifest_json, save_model, weights_path};

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{io::IoError, out_extent, Padding, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("missing weight '{0}'")]
    MissingWeight(String),
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("unsupported op '{0}'")]
    UnsupportedOp(String),
    #[error("invalid graph: {detail}")]
    InvalidGraph { detail: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

impl GraphError {
    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        GraphError::InvalidGraph {
            detail: detail.into(),
        }
    }

    fn shape(node: usize, err: TensorError) -> Self {
        GraphError::ShapeMismatch {
            node,
            detail: err.to_string(),
        }
    }
}

/// Source-dialect tag carried in model metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    Native,
    DenseAsBatchMatmul,
    PreFusedBatchNorm,
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dialect::Native => "native",
            Dialect::DenseAsBatchMatmul => "dense_as_batch_matmul",
            Dialect::PreFusedBatchNorm => "pre_fused_batch_norm",
        };
        f.write_str(s)
    }
}

/// Closed operator set. Fused kinds are produced by the optimizer and never
/// appear in source models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Conv2D,
    Dense,
    BatchMatmul,
    BatchNorm,
    ReLU,
    Softmax,
    Add,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Reshape,
    Concat,
    Constant,
    FusedConvReLU,
    FusedDenseReLU,
}

pub const ALL_OPS: [OpKind; 15] = [
    OpKind::Conv2D,
    OpKind::Dense,
    OpKind::BatchMatmul,
    OpKind::BatchNorm,
    OpKind::ReLU,
    OpKind::Softmax,
    OpKind::Add,
    OpKind::MaxPool,
    OpKind::AvgPool,
    OpKind::GlobalAvgPool,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Constant,
    OpKind::FusedConvReLU,
    OpKind::FusedDenseReLU,
];

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Conv2D => "Conv2D",
            OpKind::Dense => "Dense",
            OpKind::BatchMatmul => "BatchMatmul",
            OpKind::BatchNorm => "BatchNorm",
            OpKind::ReLU => "ReLU",
            OpKind::Softmax => "Softmax",
            OpKind::Add => "Add",
            OpKind::MaxPool => "MaxPool",
            OpKind::AvgPool => "AvgPool",
            OpKind::GlobalAvgPool => "GlobalAvgPool",
            OpKind::Reshape => "Reshape",
            OpKind::Concat => "Concat",
            OpKind::Constant => "Constant",
            OpKind::FusedConvReLU => "FusedConvReLU",
            OpKind::FusedDenseReLU => "FusedDenseReLU",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_OPS
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| GraphError::UnsupportedOp(s.to_string()))
    }
}

impl Serialize for OpKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| {
            serde::de::Error::custom(format!("unsupported op '{s}'"))
        })
    }
}

/// Reference to a value: either a named graph input or the (single) output of
/// a node. Graph inputs order before node outputs; node outputs order by id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueRef {
    Input(String),
    Node(usize),
}

impl ValueRef {
    pub fn node_id(&self) -> Option<usize> {
        match self {
            ValueRef::Node(id) => Some(*id),
            ValueRef::Input(_) => None,
        }
    }
}

/// Operator attributes. Unused fields stay `None` and are omitted from the
/// manifest; per-op completeness is checked during validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Attrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
}

impl Attrs {
    pub fn is_empty(&self) -> bool {
        self == &Attrs::default()
    }

    pub(crate) fn conv(stride: (usize, usize), padding: Padding) -> Self {
        Attrs {
            stride: Some(stride),
            padding: Some(padding),
            ..Attrs::default()
        }
    }

    pub(crate) fn pool(kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> Self {
        Attrs {
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            ..Attrs::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub op: OpKind,
    #[serde(default, skip_serializing_if = "Attrs::is_empty")]
    pub attrs: Attrs,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<ValueRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub dialect: Dialect,
    /// Graph-wide fast-math flag set by the FastMath optimization pass;
    /// softmax switches to the polynomial exponential when set.
    pub fast_math: bool,
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<Node>,
    pub outputs: Vec<usize>,
    pub labels: Vec<String>,
    pub params: BTreeMap<String, Tensor>,
}

impl ModelGraph {
    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn input(&self, name: &str) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.name == name)
    }

    /// Ids of nodes that consume `id`'s output, in node-list order.
    pub fn consumers(&self, id: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|r| r.node_id() == Some(id)))
            .map(|n| n.id)
            .collect()
    }

    /// Smallest id strictly greater than every existing node id.
    pub fn next_id(&self) -> usize {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0)
    }

    /// Structural + referential validation; shape rules are checked
    /// separately by [`ModelGraph::infer_shapes`].
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id) {
                return Err(GraphError::invalid(format!("duplicate node id {}", node.id)));
            }
        }
        let mut input_names = BTreeSet::new();
        for input in &self.inputs {
            if !input_names.insert(input.name.as_str()) {
                return Err(GraphError::invalid(format!(
                    "duplicate graph input '{}'",
                    input.name
                )));
            }
            if input.shape.is_empty() || input.shape.contains(&0) {
                return Err(GraphError::invalid(format!(
                    "graph input '{}' has invalid shape {:?}",
                    input.name, input.shape
                )));
            }
        }
        for node in &self.nodes {
            check_arity(node)?;
            for r in &node.inputs {
                match r {
                    ValueRef::Node(id) if !ids.contains(id) => {
                        return Err(GraphError::invalid(format!(
                            "node {} references missing node {id}",
                            node.id
                        )));
                    }
                    ValueRef::Input(name) if !input_names.contains(name.as_str()) => {
                        return Err(GraphError::invalid(format!(
                            "node {} references missing input '{name}'",
                            node.id
                        )));
                    }
                    _ => {}
                }
            }
            for p in &node.params {
                if !self.params.contains_key(p) {
                    return Err(GraphError::MissingWeight(p.clone()));
                }
            }
        }
        if self.outputs.is_empty() {
            return Err(GraphError::invalid("graph declares no outputs"));
        }
        for out in &self.outputs {
            if !ids.contains(out) {
                return Err(GraphError::invalid(format!("output references missing node {out}")));
            }
        }
        let referenced: BTreeSet<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.params.iter().map(String::as_str))
            .collect();
        for name in self.params.keys() {
            if !referenced.contains(name.as_str()) {
                return Err(GraphError::invalid(format!("orphan parameter '{name}'")));
            }
        }
        self.topo_sort()?;
        Ok(())
    }

    /// Kahn's algorithm with a min-heap frontier: among ready nodes the
    /// smallest id goes first, so the order is deterministic.
    pub fn topo_sort(&self) -> Result<Vec<usize>, GraphError> {
        let index: BTreeMap<usize, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        let mut indegree: BTreeMap<usize, usize> = BTreeMap::new();
        let mut fanout: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for node in &self.nodes {
            let mut degree = 0;
            for r in &node.inputs {
                if let Some(src) = r.node_id() {
                    if index.contains_key(&src) {
                        degree += 1;
                        fanout.entry(src).or_default().push(node.id);
                    }
                }
            }
            indegree.insert(node.id, degree);
        }
        let mut ready: BinaryHeap<Reverse<usize>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &next in fanout.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                let d = indegree.get_mut(&next).expect("known node");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(next));
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GraphError::CyclicGraph);
        }
        Ok(order)
    }

    /// Shape of every node output, keyed by node id.
    pub fn infer_shapes(&self) -> Result<BTreeMap<usize, Vec<usize>>, GraphError> {
        let mut shapes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let resolve = |shapes: &BTreeMap<usize, Vec<usize>>, r: &ValueRef, at: usize| {
            match r {
                ValueRef::Input(name) => self
                    .input(name)
                    .map(|i| i.shape.clone())
                    .ok_or_else(|| GraphError::invalid(format!(
                        "node {at} references missing input '{name}'"
                    ))),
                ValueRef::Node(id) => shapes.get(id).cloned().ok_or_else(|| {
                    GraphError::invalid(format!("node {at} references missing node {id}"))
                }),
            }
        };
        for id in self.topo_sort()? {
            let node = self.node(id).expect("sorted id exists");
            let mut ins = Vec::with_capacity(node.inputs.len());
            for r in &node.inputs {
                ins.push(resolve(&shapes, r, id)?);
            }
            let shape = infer_node_shape(self, node, &ins)?;
            shapes.insert(id, shape);
        }
        Ok(shapes)
    }

    /// Output shapes in declared output order.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>, GraphError> {
        let shapes = self.infer_shapes()?;
        Ok(self
            .outputs
            .iter()
            .map(|id| shapes[id].clone())
            .collect())
    }
}

fn check_arity(node: &Node) -> Result<(), GraphError> {
    let bad = |detail: String| {
        Err(GraphError::invalid(format!("node {} ({}): {detail}", node.id, node.op)))
    };
    let inputs = node.inputs.len();
    let params = node.params.len();
    let a = &node.attrs;
    match node.op {
        OpKind::Conv2D | OpKind::FusedConvReLU => {
            if inputs != 1 {
                return bad(format!("expected 1 input, got {inputs}"));
            }
            if !(1..=2).contains(&params) {
                return bad(format!("expected weights (+ optional bias), got {params} params"));
            }
            if a.stride.is_none() || a.padding.is_none() {
                return bad("stride and padding attrs required".into());
            }
        }
        OpKind::Dense | OpKind::FusedDenseReLU => {
            if inputs != 1 {
                return bad(format!("expected 1 input, got {inputs}"));
            }
            if !(1..=2).contains(&params) {
                return bad(format!("expected weights (+ optional bias), got {params} params"));
            }
        }
        OpKind::BatchMatmul => {
            if inputs != 2 || params != 0 {
                return bad(format!("expected 2 inputs and 0 params, got {inputs}/{params}"));
            }
        }
        OpKind::BatchNorm => {
            if inputs != 1 || params != 4 {
                return bad(format!(
                    "expected 1 input and gamma/beta/mean/var params, got {inputs}/{params}"
                ));
            }
            if a.epsilon.is_none() {
                return bad("epsilon attr required".into());
            }
        }
        OpKind::ReLU | OpKind::Softmax | OpKind::GlobalAvgPool => {
            if inputs != 1 || params != 0 {
                return bad(format!("expected 1 input and 0 params, got {inputs}/{params}"));
            }
        }
        OpKind::Add => {
            if inputs != 2 || params != 0 {
                return bad(format!("expected 2 inputs and 0 params, got {inputs}/{params}"));
            }
        }
        OpKind::MaxPool | OpKind::AvgPool => {
            if inputs != 1 || params != 0 {
                return bad(format!("expected 1 input and 0 params, got {inputs}/{params}"));
            }
            if a.kernel.is_none() || a.stride.is_none() || a.padding.is_none() {
                return bad("kernel, stride, and padding attrs required".into());
            }
        }
        OpKind::Reshape => {
            if inputs != 1 || params != 0 {
                return bad(format!("expected 1 input and 0 params, got {inputs}/{params}"));
            }
            if a.shape.is_none() {
                return bad("shape attr required".into());
            }
        }
        OpKind::Concat => {
            if inputs == 0 || params != 0 {
                return bad(format!("expected >=1 inputs and 0 params, got {inputs}/{params}"));
            }
            if a.axis.is_none() {
                return bad("axis attr required".into());
            }
        }
        OpKind::Constant => {
            if inputs != 0 || params != 1 {
                return bad(format!("expected 0 inputs and 1 param, got {inputs}/{params}"));
            }
        }
    }
    Ok(())
}

fn infer_node_shape(
    graph: &ModelGraph,
    node: &Node,
    ins: &[Vec<usize>],
) -> Result<Vec<usize>, GraphError> {
    let id = node.id;
    let bad = |detail: String| Err(GraphError::ShapeMismatch { node: id, detail });
    let param = |i: usize| -> &Tensor { &graph.params[&node.params[i]] };
    match node.op {
        OpKind::Conv2D | OpKind::FusedConvReLU => {
            let x = &ins[0];
            let w = param(0).shape();
            if x.len() != 4 || w.len() != 4 {
                return bad(format!("conv expects rank-4 input/weights, got {x:?} and {w:?}"));
            }
            if x[1] != w[1] {
                return bad(format!("input has {} channels, weights expect {}", x[1], w[1]));
            }
            if node.params.len() == 2 && param(1).shape() != [w[0]] {
                return bad(format!(
                    "bias shape {:?} does not match {} output channels",
                    param(1).shape(),
                    w[0]
                ));
            }
            let (sh, sw) = node.attrs.stride.expect("checked by arity");
            let padding = node.attrs.padding.expect("checked by arity");
            let (oh, _) = out_extent("conv2d", x[2], w[2], sh, padding).map_err(|e| GraphError::shape(id, e))?;
            let (ow, _) = out_extent("conv2d", x[3], w[3], sw, padding).map_err(|e| GraphError::shape(id, e))?;
            Ok(vec![x[0], w[0], oh, ow])
        }
        OpKind::Dense | OpKind::FusedDenseReLU => {
            let x = &ins[0];
            let w = param(0).shape();
            if x.len() != 2 || w.len() != 2 {
                return bad(format!("dense expects rank-2 input/weights, got {x:?} and {w:?}"));
            }
            if x[1] != w[1] {
                return bad(format!("input has {} features, weights expect {}", x[1], w[1]));
            }
            if node.params.len() == 2 && param(1).shape() != [w[0]] {
                return bad(format!(
                    "bias shape {:?} does not match {} outputs",
                    param(1).shape(),
                    w[0]
                ));
            }
            Ok(vec![x[0], w[0]])
        }
        OpKind::BatchMatmul => {
            let (a, b) = (&ins[0], &ins[1]);
            let batch_ok = a.len() == 3 && b.len() == 3 && (a[0] == b[0] || a[0] == 1 || b[0] == 1);
            if !batch_ok || a[2] != b[1] {
                return bad(format!("cannot multiply {a:?} by {b:?}"));
            }
            Ok(vec![a[0].max(b[0]), a[1], b[2]])
        }
        OpKind::BatchNorm => {
            let x = &ins[0];
            if x.len() < 2 {
                return bad(format!("batchnorm expects rank >= 2, got {x:?}"));
            }
            for (i, name) in ["gamma", "beta", "mean", "var"].iter().enumerate() {
                if param(i).shape() != [x[1]] {
                    return bad(format!(
                        "{name} shape {:?} does not match {} channels",
                        param(i).shape(),
                        x[1]
                    ));
                }
            }
            let eps = node.attrs.epsilon.expect("checked by arity");
            if eps < 0.0 || !eps.is_finite() {
                return bad(format!("invalid epsilon {eps}"));
            }
            Ok(x.clone())
        }
        OpKind::ReLU | OpKind::Softmax => Ok(ins[0].clone()),
        OpKind::Add => {
            let (a, b) = (&ins[0], &ins[1]);
            if a == b {
                return Ok(a.clone());
            }
            if b.len() == 1 && a.len() > 1 && b[0] == *a.last().expect("rank >= 1") {
                return Ok(a.clone());
            }
            if a.len() == 1 && b.len() > 1 && a[0] == *b.last().expect("rank >= 1") {
                return Ok(b.clone());
            }
            bad(format!("cannot add {a:?} and {b:?}"))
        }
        OpKind::MaxPool | OpKind::AvgPool => {
            let x = &ins[0];
            if x.len() != 4 {
                return bad(format!("pool expects rank-4 input, got {x:?}"));
            }
            let (kh, kw) = node.attrs.kernel.expect("checked by arity");
            let (sh, sw) = node.attrs.stride.expect("checked by arity");
            let padding = node.attrs.padding.expect("checked by arity");
            let (oh, _) = out_extent("pool", x[2], kh, sh, padding).map_err(|e| GraphError::shape(id, e))?;
            let (ow, _) = out_extent("pool", x[3], kw, sw, padding).map_err(|e| GraphError::shape(id, e))?;
            Ok(vec![x[0], x[1], oh, ow])
        }
        OpKind::GlobalAvgPool => {
            let x = &ins[0];
            if x.len() != 4 {
                return bad(format!("global_avg_pool expects rank-4 input, got {x:?}"));
            }
            Ok(vec![x[0], x[1]])
        }
        OpKind::Reshape => {
            let x = &ins[0];
            let target = node.attrs.shape.clone().expect("checked by arity");
            let from: usize = x.iter().product();
            let to: usize = target.iter().product();
            if target.is_empty() || target.contains(&0) || from != to {
                return bad(format!("cannot reshape {x:?} into {target:?}"));
            }
            Ok(target)
        }
        OpKind::Concat => {
            let axis = node.attrs.axis.expect("checked by arity");
            let first = &ins[0];
            if axis >= first.len() {
                return bad(format!("concat axis {axis} out of range for {first:?}"));
            }
            let mut total = 0;
            for x in ins {
                if x.len() != first.len() {
                    return bad(format!("concat rank mismatch: {first:?} vs {x:?}"));
                }
                for d in 0..x.len() {
                    if d != axis && x[d] != first[d] {
                        return bad(format!("concat extent mismatch: {first:?} vs {x:?}"));
                    }
                }
                total += x[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            Ok(shape)
        }
        OpKind::Constant => Ok(param(0).shape().to_vec()),
    }
}
