//! Graph-level optimization passes and the Basic/Default/Extended bundles.
//!
//! Each pass is a pure `ModelGraph -> ModelGraph` function that preserves
//! semantics within its tolerance class:
//!
//! * bit-exact: [`PassId::FuseOps`], [`PassId::EliminateCommonSubexpr`],
//!   [`PassId::CanonicalizeOps`], [`PassId::CombineParallelOps`];
//! * within 1e-5 relative: [`PassId::SimplifyInference`],
//!   [`PassId::FoldConstants`], [`PassId::FoldScaleAxis`] (they re-round
//!   parameters through f64 algebra);
//! * within 1e-3 absolute on softmax outputs: [`PassId::FastMath`].
//!
//! All passes are idempotent, keep surviving node ids stable, and garbage
//! collect unreachable nodes and orphaned parameters before returning, so a
//! pass output always revalidates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec::{eval_op, Backend};
use crate::ir::{Attrs, GraphError, ModelGraph, Node, OpKind, ValueRef};
use crate::tensor::Tensor;

/// Optimization bundle, mirroring compiler -o0 / -o2 / -o4 presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptLevel {
    Basic,
    Default,
    Extended,
}

pub const ALL_LEVELS: [OptLevel; 3] = [OptLevel::Basic, OptLevel::Default, OptLevel::Extended];

impl OptLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptLevel::Basic => "basic",
            OptLevel::Default => "default",
            OptLevel::Extended => "extended",
        }
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_LEVELS
            .iter()
            .find(|l| l.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown opt level '{s}' (expected basic|default|extended)"))
    }
}

/// Individually toggleable passes, in canonical application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassId {
    SimplifyInference,
    FuseOps,
    FoldConstants,
    FoldScaleAxis,
    EliminateCommonSubexpr,
    CanonicalizeOps,
    CombineParallelOps,
    FastMath,
}

pub const ALL_PASSES: [PassId; 8] = [
    PassId::SimplifyInference,
    PassId::FuseOps,
    PassId::FoldConstants,
    PassId::FoldScaleAxis,
    PassId::EliminateCommonSubexpr,
    PassId::CanonicalizeOps,
    PassId::CombineParallelOps,
    PassId::FastMath,
];

impl PassId {
    pub fn as_str(&self) -> &'static str {
        match self {
            PassId::SimplifyInference => "simplify_inference",
            PassId::FuseOps => "fuse_ops",
            PassId::FoldConstants => "fold_constants",
            PassId::FoldScaleAxis => "fold_scale_axis",
            PassId::EliminateCommonSubexpr => "eliminate_common_subexpr",
            PassId::CanonicalizeOps => "canonicalize_ops",
            PassId::CombineParallelOps => "combine_parallel_ops",
            PassId::FastMath => "fast_math",
        }
    }
}

impl fmt::Display for PassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PassId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_PASSES
            .iter()
            .find(|p| p.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown pass '{s}'"))
    }
}

/// Ordered pass list for a bundle. Basic applies only inference
/// simplification; Default adds fusion and the folding passes; Extended adds
/// CSE, canonicalization, parallel-op combination, and fast math.
pub fn pass_list(level: OptLevel) -> &'static [PassId] {
    match level {
        OptLevel::Basic => &ALL_PASSES[..1],
        OptLevel::Default => &ALL_PASSES[..4],
        OptLevel::Extended => &ALL_PASSES[..8],
    }
}

/// Fine-grained pass toggles layered over a bundle: `enable` adds passes,
/// `disable` removes them, and disable wins on conflict. The resolved list
/// always runs in canonical order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PassConfig {
    pub level: Option<OptLevel>,
    #[serde(default)]
    pub enable: Vec<PassId>,
    #[serde(default)]
    pub disable: Vec<PassId>,
}

impl PassConfig {
    pub fn from_level(level: OptLevel) -> Self {
        PassConfig {
            level: Some(level),
            ..PassConfig::default()
        }
    }

    pub fn resolve(&self) -> Vec<PassId> {
        let base: BTreeSet<PassId> = self
            .level
            .map(|l| pass_list(l).iter().copied().collect())
            .unwrap_or_default();
        ALL_PASSES
            .iter()
            .copied()
            .filter(|p| (base.contains(p) || self.enable.contains(p)) && !self.disable.contains(p))
            .collect()
    }
}

/// Applies one pass and revalidates the result.
pub fn apply_pass(graph: &ModelGraph, pass: PassId) -> Result<ModelGraph, GraphError> {
    let out = match pass {
        PassId::SimplifyInference => simplify_inference(graph)?,
        PassId::FuseOps => fuse_ops(graph)?,
        PassId::FoldConstants => fold_constants(graph)?,
        PassId::FoldScaleAxis => fold_scale_axis(graph)?,
        PassId::EliminateCommonSubexpr => eliminate_common_subexpr(graph)?,
        PassId::CanonicalizeOps => canonicalize_ops(graph)?,
        PassId::CombineParallelOps => combine_parallel_ops(graph)?,
        PassId::FastMath => fast_math(graph),
    };
    finalize(out)
}

/// Folds [`apply_pass`] over [`pass_list`]`(level)`.
pub fn apply_level(graph: &ModelGraph, level: OptLevel) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    for &pass in pass_list(level) {
        g = apply_pass(&g, pass)?;
    }
    Ok(g)
}

/// Applies the resolved pass list of a [`PassConfig`].
pub fn apply_config(graph: &ModelGraph, config: &PassConfig) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    for pass in config.resolve() {
        g = apply_pass(&g, pass)?;
    }
    Ok(g)
}

fn finalize(mut g: ModelGraph) -> Result<ModelGraph, GraphError> {
    prune(&mut g);
    g.validate()?;
    g.infer_shapes()?;
    Ok(g)
}

/// Drops nodes unreachable from the outputs and parameters no surviving node
/// references.
pub(crate) fn prune(g: &mut ModelGraph) {
    let mut live: BTreeSet<usize> = BTreeSet::new();
    let mut stack: Vec<usize> = g.outputs.clone();
    while let Some(id) = stack.pop() {
        if !live.insert(id) {
            continue;
        }
        if let Some(node) = g.node(id) {
            for r in &node.inputs {
                if let Some(dep) = r.node_id() {
                    stack.push(dep);
                }
            }
        }
    }
    g.nodes.retain(|n| live.contains(&n.id));
    let used: BTreeSet<String> = g
        .nodes
        .iter()
        .flat_map(|n| n.params.iter().cloned())
        .collect();
    g.params.retain(|name, _| used.contains(name));
}

/// Rewrites every reference to node `from` (consumer inputs and graph
/// outputs) to point at `to` instead.
fn rewire(g: &mut ModelGraph, from: usize, to: &ValueRef) {
    for node in &mut g.nodes {
        for r in &mut node.inputs {
            if r.node_id() == Some(from) {
                *r = to.clone();
            }
        }
    }
    if let Some(tid) = to.node_id() {
        for out in &mut g.outputs {
            if *out == from {
                *out = tid;
            }
        }
    }
}

fn remove_node(g: &mut ModelGraph, id: usize) {
    g.nodes.retain(|n| n.id != id);
}

fn ref_shape(
    g: &ModelGraph,
    shapes: &BTreeMap<usize, Vec<usize>>,
    r: &ValueRef,
) -> Option<Vec<usize>> {
    match r {
        ValueRef::Input(name) => g.input(name).map(|i| i.shape.clone()),
        ValueRef::Node(id) => shapes.get(id).cloned(),
    }
}

/// Per-channel scale factors gamma / sqrt(var + eps), computed in f64.
fn bn_scales(g: &ModelGraph, bn: &Node) -> Result<Vec<f64>, GraphError> {
    let gamma = &g.params[&bn.params[0]];
    let var = &g.params[&bn.params[3]];
    let eps = bn.attrs.epsilon.expect("validated batchnorm attrs") as f64;
    gamma
        .data()
        .iter()
        .zip(var.data())
        .map(|(&gm, &v)| {
            let denom = v as f64 + eps;
            if denom <= 0.0 {
                return Err(GraphError::invalid(format!(
                    "node {}: batchnorm variance {v} + epsilon {eps} is not positive",
                    bn.id
                )));
            }
            Ok(gm as f64 / denom.sqrt())
        })
        .collect()
}

/// Folds every BatchNorm that directly and exclusively follows a Conv2D or
/// Dense node into that node's weights and bias. Returns the fold count.
/// Shared by SimplifyInference and the PreFusedBatchNorm dialect conversion.
pub(crate) fn fold_batchnorms(graph: &ModelGraph) -> Result<(ModelGraph, usize), GraphError> {
    let mut g = graph.clone();
    let mut folds = 0;
    loop {
        let candidate = g.nodes.iter().find_map(|bn| {
            if bn.op != OpKind::BatchNorm {
                return None;
            }
            let prev = bn.inputs[0].node_id()?;
            let prev_op = g.node(prev)?.op;
            if !matches!(prev_op, OpKind::Conv2D | OpKind::Dense) {
                return None;
            }
            (g.consumers(prev) == vec![bn.id]).then_some((bn.id, prev))
        });
        let Some((bn_id, prev_id)) = candidate else {
            break;
        };

        let bn = g.node(bn_id).expect("candidate exists").clone();
        let prev = g.node(prev_id).expect("candidate exists").clone();
        let scales = bn_scales(&g, &bn)?;
        let beta = g.params[&bn.params[1]].clone();
        let mean = g.params[&bn.params[2]].clone();

        let w = &g.params[&prev.params[0]];
        let out_c = w.shape()[0];
        if scales.len() != out_c {
            return Err(GraphError::invalid(format!(
                "node {bn_id}: batchnorm channels {} do not match producer outputs {out_c}",
                scales.len()
            )));
        }
        let per_channel = w.len() / out_c;
        let folded_w: Vec<f32> = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 * scales[i / per_channel]) as f32)
            .collect();
        let bias = prev.params.get(1).map(|name| g.params[name].clone());
        let folded_b: Vec<f32> = (0..out_c)
            .map(|k| {
                let b = bias.as_ref().map_or(0.0, |t| t.data()[k] as f64);
                ((b - mean.data()[k] as f64) * scales[k] + beta.data()[k] as f64) as f32
            })
            .collect();

        let w_name = format!("{}#bn", prev.params[0]);
        let b_name = match prev.params.get(1) {
            Some(b) => format!("{b}#bn"),
            None => format!("{}#bn.bias", prev.params[0]),
        };
        let w_shape = w.shape().to_vec();
        g.params
            .insert(w_name.clone(), Tensor::new(w_shape, folded_w).expect("weight shape"));
        g.params
            .insert(b_name.clone(), Tensor::new(vec![out_c], folded_b).expect("bias shape"));
        let prev_mut = g
            .nodes
            .iter_mut()
            .find(|n| n.id == prev_id)
            .expect("candidate exists");
        prev_mut.params = vec![w_name, b_name];

        let replacement = ValueRef::Node(prev_id);
        rewire(&mut g, bn_id, &replacement);
        remove_node(&mut g, bn_id);
        folds += 1;
    }
    Ok((g, folds))
}

/// BatchNorm folding plus identity/chained Reshape elimination.
fn simplify_inference(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let (mut g, _) = fold_batchnorms(graph)?;
    loop {
        let shapes = g.infer_shapes()?;
        let mut changed = false;
        for node in g.nodes.clone() {
            if node.op != OpKind::Reshape {
                continue;
            }
            let target = node.attrs.shape.clone().expect("validated reshape attrs");
            let source = ref_shape(&g, &shapes, &node.inputs[0]);
            if source.as_deref() == Some(&target[..]) {
                let replacement = node.inputs[0].clone();
                if replacement.node_id().is_none() && g.outputs.contains(&node.id) {
                    continue;
                }
                rewire(&mut g, node.id, &replacement);
                remove_node(&mut g, node.id);
                changed = true;
                break;
            }
            if let Some(prev_id) = node.inputs[0].node_id() {
                if g.node(prev_id).map(|n| n.op) == Some(OpKind::Reshape) {
                    let grand = g.node(prev_id).expect("exists").inputs[0].clone();
                    g.nodes
                        .iter_mut()
                        .find(|n| n.id == node.id)
                        .expect("exists")
                        .inputs[0] = grand;
                    changed = true;
                    break;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(g)
}

/// Rewrites Conv2D -> ReLU into FusedConvReLU and Dense -> ReLU into
/// FusedDenseReLU wherever the ReLU is the producer's only consumer.
fn fuse_ops(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    loop {
        let candidate = g.nodes.iter().find_map(|relu| {
            if relu.op != OpKind::ReLU {
                return None;
            }
            let prev = relu.inputs[0].node_id()?;
            let fused = match g.node(prev)?.op {
                OpKind::Conv2D => OpKind::FusedConvReLU,
                OpKind::Dense => OpKind::FusedDenseReLU,
                _ => return None,
            };
            (g.consumers(prev) == vec![relu.id]).then_some((relu.id, prev, fused))
        });
        let Some((relu_id, prev_id, fused)) = candidate else {
            break;
        };
        g.nodes
            .iter_mut()
            .find(|n| n.id == prev_id)
            .expect("candidate exists")
            .op = fused;
        let replacement = ValueRef::Node(prev_id);
        rewire(&mut g, relu_id, &replacement);
        remove_node(&mut g, relu_id);
    }
    Ok(g)
}

/// Evaluates every node whose transitive inputs are all Constants and
/// replaces it (same id) with a Constant holding the result.
fn fold_constants(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    let order = g.topo_sort()?;
    let mut constant: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut folded: Vec<usize> = Vec::new();
    for id in order {
        let node = g.node(id).expect("topo ids exist").clone();
        if node.op == OpKind::Constant {
            constant.insert(id, g.params[&node.params[0]].clone());
            continue;
        }
        let const_inputs: Option<Vec<&Tensor>> = node
            .inputs
            .iter()
            .map(|r| r.node_id().and_then(|i| constant.get(&i)))
            .collect();
        let Some(ins) = const_inputs else {
            continue;
        };
        if ins.is_empty() {
            continue;
        }
        let value = eval_op(&node, &g.params, &ins, Backend::Reference, g.fast_math)
            .map_err(|e| GraphError::invalid(format!("folding node {id}: {e}")))?;
        constant.insert(id, value);
        folded.push(id);
    }
    for id in folded {
        let name = format!("const#f{id}");
        g.params.insert(name.clone(), constant[&id].clone());
        let node = g.nodes.iter_mut().find(|n| n.id == id).expect("folded node exists");
        node.op = OpKind::Constant;
        node.attrs = Attrs::default();
        node.params = vec![name];
        node.inputs = Vec::new();
    }
    Ok(g)
}

/// Folds pure-scale BatchNorms (beta and mean identically zero) into the
/// following conv's input channels when that conv is the sole consumer.
fn fold_scale_axis(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    loop {
        let candidate = g.nodes.iter().find_map(|bn| {
            if bn.op != OpKind::BatchNorm {
                return None;
            }
            let pure_scale = g.params[&bn.params[1]].data().iter().all(|&v| v == 0.0)
                && g.params[&bn.params[2]].data().iter().all(|&v| v == 0.0);
            if !pure_scale {
                return None;
            }
            let consumers = g.consumers(bn.id);
            let &[next_id] = consumers.as_slice() else {
                return None;
            };
            let next = g.node(next_id)?;
            let conv_like = matches!(next.op, OpKind::Conv2D | OpKind::FusedConvReLU);
            (conv_like && next.inputs[0] == ValueRef::Node(bn.id)).then_some((bn.id, next_id))
        });
        let Some((bn_id, conv_id)) = candidate else {
            break;
        };

        let bn = g.node(bn_id).expect("candidate exists").clone();
        let scales = bn_scales(&g, &bn)?;
        let conv = g.node(conv_id).expect("candidate exists").clone();
        let w = &g.params[&conv.params[0]];
        let (in_c, k_h, k_w) = (w.shape()[1], w.shape()[2], w.shape()[3]);
        if scales.len() != in_c {
            return Err(GraphError::invalid(format!(
                "node {bn_id}: scale channels {} do not match conv input channels {in_c}",
                scales.len()
            )));
        }
        let scaled: Vec<f32> = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / (k_h * k_w)) % in_c;
                (v as f64 * scales[c]) as f32
            })
            .collect();
        let w_name = format!("{}#scale", conv.params[0]);
        g.params
            .insert(w_name.clone(), Tensor::new(w.shape().to_vec(), scaled).expect("weight shape"));
        let conv_mut = g
            .nodes
            .iter_mut()
            .find(|n| n.id == conv_id)
            .expect("candidate exists");
        conv_mut.params[0] = w_name;
        conv_mut.inputs[0] = bn.inputs[0].clone();
        remove_node(&mut g, bn_id);
    }
    Ok(g)
}

/// Hash-consing CSE: nodes with the same op, attrs, params, and (canonical)
/// inputs merge into the earliest occurrence.
fn eliminate_common_subexpr(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    let order = g.topo_sort()?;
    let mut canonical: BTreeMap<usize, usize> = BTreeMap::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for id in &order {
        let node = g.node(*id).expect("topo ids exist");
        let inputs: Vec<ValueRef> = node
            .inputs
            .iter()
            .map(|r| match r.node_id() {
                Some(dep) => ValueRef::Node(canonical[&dep]),
                None => r.clone(),
            })
            .collect();
        let attrs = serde_json::to_string(&node.attrs).expect("attrs serialize");
        let key = format!("{}|{}|{:?}|{:?}", node.op, attrs, node.params, inputs);
        let rep = *seen.entry(key).or_insert(*id);
        canonical.insert(*id, rep);
    }
    g.nodes.retain(|n| canonical[&n.id] == n.id);
    for node in &mut g.nodes {
        for r in &mut node.inputs {
            if let Some(dep) = r.node_id() {
                *r = ValueRef::Node(canonical[&dep]);
            }
        }
    }
    for out in &mut g.outputs {
        *out = canonical[out];
    }
    Ok(g)
}

/// Normalizes commutative Add operand order (ascending by reference) and
/// rewrites single-batch BatchMatmul against a Constant into Dense form.
fn canonicalize_ops(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    for node in &mut g.nodes {
        if node.op == OpKind::Add {
            node.inputs.sort();
        }
    }
    loop {
        let shapes = g.infer_shapes()?;
        let candidate = g.nodes.iter().find_map(|bmm| {
            if bmm.op != OpKind::BatchMatmul {
                return None;
            }
            let rhs_id = bmm.inputs[1].node_id()?;
            if g.node(rhs_id)?.op != OpKind::Constant {
                return None;
            }
            let a = ref_shape(&g, &shapes, &bmm.inputs[0])?;
            let b = ref_shape(&g, &shapes, &bmm.inputs[1])?;
            (a[0] == 1 && b[0] == 1).then(|| (bmm.id, rhs_id, a, b))
        });
        let Some((bmm_id, rhs_id, a_shape, b_shape)) = candidate else {
            break;
        };

        let (m, k, n) = (a_shape[1], a_shape[2], b_shape[2]);
        let b_tensor = {
            let rhs = g.node(rhs_id).expect("candidate exists");
            g.params[&rhs.params[0]].clone()
        };
        let mut w = vec![0.0f32; n * k];
        for kk in 0..k {
            for nn in 0..n {
                w[nn * k + kk] = b_tensor.data()[kk * n + nn];
            }
        }
        let w_name = format!(
            "{}#t",
            g.node(rhs_id).expect("candidate exists").params[0]
        );
        g.params
            .insert(w_name.clone(), Tensor::new(vec![n, k], w).expect("weight shape"));

        let bmm_input = g.node(bmm_id).expect("candidate exists").inputs[0].clone();
        let base = g.next_id();
        let r1 = Node {
            id: base,
            op: OpKind::Reshape,
            attrs: Attrs {
                shape: Some(vec![m, k]),
                ..Attrs::default()
            },
            params: vec![],
            inputs: vec![bmm_input],
        };
        let dense = Node {
            id: base + 1,
            op: OpKind::Dense,
            attrs: Attrs::default(),
            params: vec![w_name],
            inputs: vec![ValueRef::Node(base)],
        };
        let r2 = Node {
            id: base + 2,
            op: OpKind::Reshape,
            attrs: Attrs {
                shape: Some(vec![1, m, n]),
                ..Attrs::default()
            },
            params: vec![],
            inputs: vec![ValueRef::Node(base + 1)],
        };
        g.nodes.extend([r1, dense, r2]);
        let replacement = ValueRef::Node(base + 2);
        rewire(&mut g, bmm_id, &replacement);
        remove_node(&mut g, bmm_id);
    }
    Ok(g)
}

/// True when `id`'s only consumer is `concat_id` and it feeds exactly one
/// concat slot.
fn exclusive_feed(g: &ModelGraph, id: usize, concat: &Node) -> bool {
    g.consumers(id) == vec![concat.id]
        && concat
            .inputs
            .iter()
            .filter(|r| r.node_id() == Some(id))
            .count()
            == 1
}

/// Stacks rank-matched tensors along axis 0.
fn stack0(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data: Vec<f32> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stacked shape")
}

/// Merges sibling convolutions feeding adjacent Concat slots into one wider
/// conv, and a Concat of sibling Dense nodes into one batched matmul.
fn combine_parallel_ops(graph: &ModelGraph) -> Result<ModelGraph, GraphError> {
    let mut g = graph.clone();
    loop {
        if combine_conv_siblings(&mut g)? || combine_dense_siblings(&mut g)? {
            continue;
        }
        break;
    }
    Ok(g)
}

fn combine_conv_siblings(g: &mut ModelGraph) -> Result<bool, GraphError> {
    let concats: Vec<Node> = g
        .nodes
        .iter()
        .filter(|n| n.op == OpKind::Concat && n.attrs.axis == Some(1))
        .cloned()
        .collect();
    for concat in concats {
        let member = |r: &ValueRef| -> Option<Node> {
            let id = r.node_id()?;
            let node = g.node(id)?;
            matches!(node.op, OpKind::Conv2D | OpKind::FusedConvReLU).then(|| node.clone())
        };
        let siblings = |a: &Node, b: &Node| -> bool {
            a.op == b.op
                && a.attrs == b.attrs
                && a.inputs == b.inputs
                && a.params.len() == b.params.len()
                && g.params[&a.params[0]].shape()[1..] == g.params[&b.params[0]].shape()[1..]
                && exclusive_feed(g, a.id, &concat)
                && exclusive_feed(g, b.id, &concat)
        };
        let inputs = concat.inputs.clone();
        for start in 0..inputs.len() {
            let Some(first) = member(&inputs[start]) else {
                continue;
            };
            let mut run = vec![first.clone()];
            for r in &inputs[start + 1..] {
                match member(r) {
                    Some(next) if siblings(&first, &next) => run.push(next),
                    _ => break,
                }
            }
            if run.len() < 2 {
                continue;
            }

            let ids: Vec<String> = run.iter().map(|n| n.id.to_string()).collect();
            let stem = format!("cmb#{}", ids.join("-"));
            let ws: Vec<&Tensor> = run.iter().map(|n| &g.params[&n.params[0]]).collect();
            let w_name = format!("{stem}.w");
            g.params.insert(w_name.clone(), stack0(&ws));
            let mut params = vec![w_name];
            if run[0].params.len() == 2 {
                let bs: Vec<&Tensor> = run.iter().map(|n| &g.params[&n.params[1]]).collect();
                let b_name = format!("{stem}.b");
                g.params.insert(b_name.clone(), stack0(&bs));
                params.push(b_name);
            }
            let merged_id = g.next_id();
            g.nodes.push(Node {
                id: merged_id,
                op: run[0].op,
                attrs: run[0].attrs.clone(),
                params,
                inputs: run[0].inputs.clone(),
            });
            let concat_mut = g
                .nodes
                .iter_mut()
                .find(|n| n.id == concat.id)
                .expect("concat exists");
            concat_mut
                .inputs
                .splice(start..start + run.len(), [ValueRef::Node(merged_id)]);
            if concat_mut.inputs.len() == 1 {
                let only = concat_mut.inputs[0].clone();
                rewire(g, concat.id, &only);
                remove_node(g, concat.id);
            }
            return Ok(true);
        }
    }
    Ok(false)
}

fn combine_dense_siblings(g: &mut ModelGraph) -> Result<bool, GraphError> {
    let shapes = g.infer_shapes()?;
    let concats: Vec<Node> = g
        .nodes
        .iter()
        .filter(|n| n.op == OpKind::Concat && n.attrs.axis == Some(1))
        .cloned()
        .collect();
    for concat in concats {
        let members: Option<Vec<Node>> = concat
            .inputs
            .iter()
            .map(|r| {
                let id = r.node_id()?;
                let node = g.node(id)?;
                (node.op == OpKind::Dense && exclusive_feed(g, id, &concat))
                    .then(|| node.clone())
            })
            .collect();
        let Some(members) = members else {
            continue;
        };
        if members.len() < 2 {
            continue;
        }
        let first = &members[0];
        let in_shape = ref_shape(g, &shapes, &first.inputs[0]);
        let same_family = members.iter().all(|m| {
            m.inputs == first.inputs
                && m.params.len() == first.params.len()
                && g.params[&m.params[0]].shape() == g.params[&first.params[0]].shape()
        });
        let Some(in_shape) = in_shape else {
            continue;
        };
        if !(same_family && in_shape.len() == 2 && in_shape[0] == 1) {
            continue;
        }

        let feat = in_shape[1];
        let out = g.params[&first.params[0]].shape()[0];
        let count = members.len();
        // Weights transpose to [count, feat, out] so one broadcast batch
        // matmul computes every member's row in concat order.
        let mut stacked = vec![0.0f32; count * feat * out];
        for (i, m) in members.iter().enumerate() {
            let w = g.params[&m.params[0]].data();
            for o in 0..out {
                for f in 0..feat {
                    stacked[i * feat * out + f * out + o] = w[o * feat + f];
                }
            }
        }
        let ids: Vec<String> = members.iter().map(|n| n.id.to_string()).collect();
        let stem = format!("cmb#{}", ids.join("-"));
        let w_name = format!("{stem}.w");
        g.params.insert(
            w_name.clone(),
            Tensor::new(vec![count, feat, out], stacked).expect("stacked shape"),
        );

        let base = g.next_id();
        let r1 = Node {
            id: base,
            op: OpKind::Reshape,
            attrs: Attrs {
                shape: Some(vec![1, 1, feat]),
                ..Attrs::default()
            },
            params: vec![],
            inputs: vec![first.inputs[0].clone()],
        };
        let w_const = Node {
            id: base + 1,
            op: OpKind::Constant,
            attrs: Attrs::default(),
            params: vec![w_name],
            inputs: vec![],
        };
        let bmm = Node {
            id: base + 2,
            op: OpKind::BatchMatmul,
            attrs: Attrs::default(),
            params: vec![],
            inputs: vec![ValueRef::Node(base), ValueRef::Node(base + 1)],
        };
        let r2 = Node {
            id: base + 3,
            op: OpKind::Reshape,
            attrs: Attrs {
                shape: Some(vec![1, count * out]),
                ..Attrs::default()
            },
            params: vec![],
            inputs: vec![ValueRef::Node(base + 2)],
        };
        g.nodes.extend([r1, w_const, bmm, r2]);
        let mut tail = ValueRef::Node(base + 3);

        if first.params.len() == 2 {
            let bs: Vec<&Tensor> = members.iter().map(|m| &g.params[&m.params[1]]).collect();
            let b_name = format!("{stem}.b");
            g.params.insert(b_name.clone(), stack0(&bs));
            let b_const = Node {
                id: base + 4,
                op: OpKind::Constant,
                attrs: Attrs::default(),
                params: vec![b_name],
                inputs: vec![],
            };
            let add = Node {
                id: base + 5,
                op: OpKind::Add,
                attrs: Attrs::default(),
                params: vec![],
                inputs: vec![tail.clone(), ValueRef::Node(base + 4)],
            };
            g.nodes.extend([b_const, add]);
            tail = ValueRef::Node(base + 5);
        }
        rewire(g, concat.id, &tail);
        remove_node(g, concat.id);
        return Ok(true);
    }
    Ok(false)
}

/// Marks the graph as fast-math: softmax may use the polynomial exp
/// approximation and kernels may reassociate accumulation.
fn fast_math(graph: &ModelGraph) -> ModelGraph {
    let mut g = graph.clone();
    g.fast_math = true;
    g
}
