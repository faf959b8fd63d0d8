//! Variant production: simulated framework conversions (dialect rewrites),
//! conversion-fault injection (deterministic weight noise), parameter
//! repair, and enumeration of an experiment's variant matrix.
//!
//! A variant is a (dialect, noise, opt level, backend) point in the
//! experiment's cross product. Conversions that a dialect cannot express
//! fail loudly but non-fatally: the combination is recorded as a
//! [`FailedVariant`] and the rest of the run continues.

pub mod rng;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::exec::Backend;
use crate::ir::{desk, load_model, Attrs, Dialect, GraphError, ModelGraph, Node, OpKind, ValueRef};
use crate::opt::{self, OptLevel, PassConfig};
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum VariantError {
    /// The target dialect cannot express an op in the graph.
    UnsupportedOp { dialect: Dialect, op: OpKind },
    /// Parameter names cannot be mapped between source and target; the
    /// divergence is structural, not parametric.
    ParamMapMismatch { detail: String },
    /// Experiment configuration is unusable.
    Config { detail: String },
    Graph(GraphError),
}

impl VariantError {
    pub(crate) fn config(detail: impl Into<String>) -> Self {
        VariantError::Config {
            detail: detail.into(),
        }
    }

    pub(crate) fn mismatch(detail: impl Into<String>) -> Self {
        VariantError::ParamMapMismatch {
            detail: detail.into(),
        }
    }
}

impl fmt::Display for VariantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantError::UnsupportedOp { dialect, op } => {
                write!(f, "dialect {dialect} cannot express op {op}")
            }
            VariantError::ParamMapMismatch { detail } => {
                write!(f, "parameter map mismatch: {detail}")
            }
            VariantError::Config { detail } => write!(f, "config error: {detail}"),
            VariantError::Graph(e) => write!(f, "graph error: {e}"),
        }
    }
}

impl std::error::Error for VariantError {}

impl From<GraphError> for VariantError {
    fn from(e: GraphError) -> Self {
        VariantError::Graph(e)
    }
}

/// Deterministic weight-noise settings. `per_layer` overrides sigma for
/// parameters whose name prefix (up to the first '.') matches the key;
/// unlisted layers use the base sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f32,
    pub clamp: f32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_layer: BTreeMap<String, f32>,
}

impl NoiseSpec {
    pub fn new(sigma: f32, clamp: f32, seed: u64) -> Self {
        NoiseSpec {
            sigma,
            clamp,
            seed,
            per_layer: BTreeMap::new(),
        }
    }

    fn sigma_for(&self, param: &str) -> f32 {
        let prefix = param.split('.').next().unwrap_or(param);
        self.per_layer.get(prefix).copied().unwrap_or(self.sigma)
    }
}

/// One point of the experiment cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub model: String,
    pub dialect: Dialect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub level: OptLevel,
    pub backend: Backend,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub spec: VariantSpec,
    pub graph: ModelGraph,
}

/// A combination whose materialization failed (for example an inexpressible
/// dialect conversion); rendered as a FAILED cell in the comparison matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedVariant {
    pub spec: VariantSpec,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VariantSet {
    pub variants: Vec<Variant>,
    pub failures: Vec<FailedVariant>,
}

fn dialect_tag(d: Dialect) -> &'static str {
    match d {
        Dialect::Native => "native",
        Dialect::DenseAsBatchMatmul => "dbmm",
        Dialect::PreFusedBatchNorm => "prebn",
    }
}

/// Stable, filename-safe variant id:
/// `{model}-{dialect}-{clean|n<seed>}-{level}-{backend}`.
pub fn variant_id(
    model: &str,
    dialect: Dialect,
    noise: Option<&NoiseSpec>,
    level: OptLevel,
    backend: Backend,
) -> String {
    let noise_tag = match noise {
        Some(n) => format!("n{}", n.seed),
        None => "clean".to_string(),
    };
    format!(
        "{model}-{}-{noise_tag}-{level}-{}",
        dialect_tag(dialect),
        backend.short()
    )
}

/// Rewrites a Native graph into the target dialect.
///
/// * `Native` is the identity.
/// * `DenseAsBatchMatmul` expands every Dense into
///   Reshape -> BatchMatmul(Constant transposed weights) -> Reshape, plus a
///   trailing Add for the bias. Concat is declared inexpressible in this
///   dialect, exercising the conversion-crash path.
/// * `PreFusedBatchNorm` applies BatchNorm folding eagerly, as some
///   converter stacks do.
pub fn convert(graph: &ModelGraph, dialect: Dialect) -> Result<ModelGraph, VariantError> {
    if graph.dialect != Dialect::Native {
        return Err(VariantError::Graph(GraphError::invalid(format!(
            "convert expects a Native source, got {}",
            graph.dialect
        ))));
    }
    match dialect {
        Dialect::Native => Ok(graph.clone()),
        Dialect::DenseAsBatchMatmul => dense_as_batch_matmul(graph),
        Dialect::PreFusedBatchNorm => {
            let (mut g, _) = opt::fold_batchnorms(graph)?;
            opt::prune(&mut g);
            g.dialect = Dialect::PreFusedBatchNorm;
            g.validate()?;
            g.infer_shapes()?;
            Ok(g)
        }
    }
}

fn dense_as_batch_matmul(graph: &ModelGraph) -> Result<ModelGraph, VariantError> {
    if let Some(node) = graph.nodes.iter().find(|n| n.op == OpKind::Concat) {
        return Err(VariantError::UnsupportedOp {
            dialect: Dialect::DenseAsBatchMatmul,
            op: node.op,
        });
    }
    let mut g = graph.clone();
    let shapes = g.infer_shapes()?;
    let dense_ids: Vec<usize> = g
        .nodes
        .iter()
        .filter(|n| n.op == OpKind::Dense)
        .map(|n| n.id)
        .collect();
    for id in dense_ids {
        let dense = g.node(id).expect("collected above").clone();
        let w_name = dense.params[0].clone();
        let w = &g.params[&w_name];
        let (out, feat) = (w.shape()[0], w.shape()[1]);
        let rows = shapes[&id][0];

        // Same parameter name, transposed layout: [O,F] becomes [1,F,O].
        let mut transposed = vec![0.0f32; feat * out];
        for o in 0..out {
            for f in 0..feat {
                transposed[f * out + o] = w.data()[o * feat + f];
            }
        }
        g.params.insert(
            w_name.clone(),
            Tensor::new(vec![1, feat, out], transposed).expect("weight shape"),
        );

        let base = g.next_id();
        let r1 = Node {
            id: base,
            op: OpKind::Reshape,
            attrs: Attrs {
                shape: Some(vec![1, rows, feat]),
                ..Attrs::default()
            },
            params: vec![],
            inputs: vec![dense.inputs[0].clone()],
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
                shape: Some(vec![rows, out]),
                ..Attrs::default()
            },
            params: vec![],
            inputs: vec![ValueRef::Node(base + 2)],
        };
        g.nodes.extend([r1, w_const, bmm, r2]);
        let mut tail = ValueRef::Node(base + 3);

        if let Some(b_name) = dense.params.get(1) {
            let b_const = Node {
                id: base + 4,
                op: OpKind::Constant,
                attrs: Attrs::default(),
                params: vec![b_name.clone()],
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

        for node in &mut g.nodes {
            for r in &mut node.inputs {
                if r.node_id() == Some(id) {
                    *r = tail.clone();
                }
            }
        }
        if let Some(tid) = tail.node_id() {
            for out_id in &mut g.outputs {
                if *out_id == id {
                    *out_id = tid;
                }
            }
        }
        g.nodes.retain(|n| n.id != id);
    }
    g.dialect = Dialect::DenseAsBatchMatmul;
    g.validate()?;
    g.infer_shapes()?;
    Ok(g)
}

/// Perturbs every parameter by i.i.d. Gaussian(0, sigma^2) draws clamped to
/// [-clamp, +clamp]. Draws come from the counter-based generator keyed by
/// (seed, parameter name, element index), so results are independent of
/// iteration order. Graph structure is untouched.
pub fn inject_noise(graph: &ModelGraph, sigma: f32, clamp: f32, seed: u64) -> ModelGraph {
    inject_noise_spec(graph, &NoiseSpec::new(sigma, clamp, seed))
}

/// [`inject_noise`] with per-layer sigma overrides.
pub fn inject_noise_spec(graph: &ModelGraph, spec: &NoiseSpec) -> ModelGraph {
    assert!(spec.sigma >= 0.0, "noise sigma must be non-negative");
    assert!(spec.clamp >= 0.0, "noise clamp must be non-negative");
    let mut g = graph.clone();
    for (name, tensor) in &mut g.params {
        let sigma = spec.sigma_for(name) as f64;
        if sigma == 0.0 {
            continue;
        }
        let clamp = spec.clamp as f64;
        let key = rng::stream_key(spec.seed, name);
        let data = tensor
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let delta = (rng::gaussian(key, i as u64) * sigma).clamp(-clamp, clamp);
                (v as f64 + delta) as f32
            })
            .collect();
        *tensor = Tensor::new(tensor.shape().to_vec(), data).expect("shape unchanged");
    }
    g
}

/// Replaces every target parameter with the source's bit-exact tensor,
/// applying the dialect-aware name mapping. The mapping must be a bijection:
/// unmapped names on either side mean the divergence is structural and the
/// repair refuses to guess.
pub fn repair_parameters(
    target: &ModelGraph,
    source: &ModelGraph,
) -> Result<ModelGraph, VariantError> {
    let mut repaired = target.clone();
    for (name, t_tensor) in &mut repaired.params {
        let Some(s_tensor) = source.params.get(name) else {
            return Err(VariantError::mismatch(format!(
                "target parameter '{name}' has no source counterpart"
            )));
        };
        if s_tensor.shape() == t_tensor.shape() {
            *t_tensor = s_tensor.clone();
            continue;
        }
        let transposable = target.dialect == Dialect::DenseAsBatchMatmul
            && t_tensor.rank() == 3
            && s_tensor.rank() == 2
            && t_tensor.shape()[0] == 1
            && s_tensor.shape() == [t_tensor.shape()[2], t_tensor.shape()[1]];
        if !transposable {
            return Err(VariantError::mismatch(format!(
                "parameter '{name}' shapes {:?} and {:?} are incompatible",
                s_tensor.shape(),
                t_tensor.shape()
            )));
        }
        let (feat, out) = (t_tensor.shape()[1], t_tensor.shape()[2]);
        let mut transposed = vec![0.0f32; feat * out];
        for o in 0..out {
            for f in 0..feat {
                transposed[f * out + o] = s_tensor.data()[o * feat + f];
            }
        }
        *t_tensor = Tensor::new(vec![1, feat, out], transposed).expect("weight shape");
    }
    if let Some(extra) = source.params.keys().find(|k| !repaired.params.contains_key(*k)) {
        return Err(VariantError::mismatch(format!(
            "source parameter '{extra}' is absent from the target"
        )));
    }
    Ok(repaired)
}

/// Experiment configuration, deserialized from the TOML config file. Axis
/// lists may be empty: dialects default to Native only, levels to Basic,
/// backends to Reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dialects: Vec<Dialect>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backends: Vec<Backend>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
    #[serde(default)]
    pub opt: OptConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: None,
            models: Vec::new(),
            dialects: Vec::new(),
            backends: Vec::new(),
            noise: None,
            corpus: None,
            opt: OptConfig::default(),
            k: default_k(),
            repeats: default_repeats(),
            warmup: default_warmup(),
            seed: 0,
            out: None,
        }
    }
}

fn default_k() -> usize {
    5
}

fn default_repeats() -> usize {
    10
}

fn default_warmup() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: String,
}

/// Optimization axis plus fine-grained pass toggles shared by every level in
/// the axis; disable wins over both level and enable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<OptLevel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<OptLevel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub enable: Vec<opt::PassId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disable: Vec<opt::PassId>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), VariantError> {
        if self.model_names().is_empty() {
            return Err(VariantError::config("no model specified"));
        }
        if let Some(n) = &self.noise {
            if n.sigma < 0.0 || !n.sigma.is_finite() {
                return Err(VariantError::config(format!("noise.sigma {} invalid", n.sigma)));
            }
            if n.clamp < 0.0 || !n.clamp.is_finite() {
                return Err(VariantError::config(format!("noise.clamp {} invalid", n.clamp)));
            }
        }
        if self.repeats == 0 {
            return Err(VariantError::config("repeats must be at least 1"));
        }
        if self.k == 0 {
            return Err(VariantError::config("k must be at least 1"));
        }
        Ok(())
    }

    pub fn model_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        if let Some(m) = &self.model {
            names.push(m.clone());
        }
        for m in &self.models {
            if !names.contains(m) {
                names.push(m.clone());
            }
        }
        names
    }

    pub fn dialect_axis(&self) -> Vec<Dialect> {
        let mut axis = Vec::new();
        for d in &self.dialects {
            if !axis.contains(d) {
                axis.push(*d);
            }
        }
        if axis.is_empty() {
            axis.push(Dialect::Native);
        }
        axis
    }

    pub fn level_axis(&self) -> Vec<OptLevel> {
        let mut axis = Vec::new();
        if let Some(l) = self.opt.level {
            axis.push(l);
        }
        for l in &self.opt.levels {
            if !axis.contains(l) {
                axis.push(*l);
            }
        }
        if axis.is_empty() {
            axis.push(OptLevel::Basic);
        }
        axis
    }

    pub fn backend_axis(&self) -> Vec<Backend> {
        let mut axis = Vec::new();
        for b in &self.backends {
            if !axis.contains(b) {
                axis.push(*b);
            }
        }
        if axis.is_empty() {
            axis.push(Backend::Reference);
        }
        axis
    }

    /// Noise axis: a clean point always runs; a noisy point joins it when a
    /// noise block is configured.
    pub fn noise_axis(&self) -> Vec<Option<NoiseSpec>> {
        let mut axis = vec![None];
        if let Some(n) = &self.noise {
            axis.push(Some(n.clone()));
        }
        axis
    }
}

/// Resolves a model reference: a bundled desk model name, or a manifest
/// path on disk.
pub fn resolve_model(name: &str) -> Result<ModelGraph, VariantError> {
    if let Some(g) = desk::desk_model(name) {
        return Ok(g);
    }
    let path = std::path::Path::new(name);
    if path.exists() {
        return load_model(path).map_err(VariantError::Graph);
    }
    Err(VariantError::config(format!(
        "model '{name}' is neither a bundled desk model nor a manifest path"
    )))
}

/// Materializes the experiment's cross product of
/// dialects x noise x levels x backends for every model. Conversion or
/// optimization failures become [`FailedVariant`] entries, not errors.
pub fn enumerate_variants(config: &ExperimentConfig) -> Result<VariantSet, VariantError> {
    config.validate()?;
    let mut set = VariantSet::default();
    for name in config.model_names() {
        let source = resolve_model(&name)?;
        for dialect in config.dialect_axis() {
            for noise in config.noise_axis() {
                for level in config.level_axis() {
                    for backend in config.backend_axis() {
                        let spec = VariantSpec {
                            model: source.name.clone(),
                            dialect,
                            noise: noise.clone(),
                            level,
                            backend,
                            id: variant_id(&source.name, dialect, noise.as_ref(), level, backend),
                        };
                        match materialize(&source, &spec, &config.opt) {
                            Ok(graph) => set.variants.push(Variant { spec, graph }),
                            Err(e) => set.failures.push(FailedVariant {
                                spec,
                                error: e.to_string(),
                            }),
                        }
                    }
                }
            }
        }
    }
    Ok(set)
}

fn materialize(
    source: &ModelGraph,
    spec: &VariantSpec,
    opt_config: &OptConfig,
) -> Result<ModelGraph, VariantError> {
    let converted = convert(source, spec.dialect)?;
    let noisy = match &spec.noise {
        Some(n) => inject_noise_spec(&converted, n),
        None => converted,
    };
    let pass_config = PassConfig {
        level: Some(spec.level),
        enable: opt_config.enable.clone(),
        disable: opt_config.disable.clone(),
    };
    let optimized = opt::apply_config(&noisy, &pass_config)?;
    optimized.validate()?;
    Ok(optimized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{backend_execute, Backend};
    use crate::ir::desk;

    fn image(tag: &str) -> Tensor {
        let key = rng::stream_key(0x11a9, tag);
        let len: usize = desk::INPUT_SHAPE.iter().product();
        let data = (0..len)
            .map(|i| ((rng::uniform(key, i as u64) - 0.5) * 0.1) as f32)
            .collect();
        Tensor::new(desk::INPUT_SHAPE.to_vec(), data).expect("image shape")
    }

    fn run(g: &ModelGraph, img: &Tensor) -> Vec<f32> {
        backend_execute(g, img, Backend::Reference)
            .expect("graph executes")
            .into_data()
    }

    #[test]
    fn convert_native_is_identity() {
        let g = desk::tinynet_a();
        assert_eq!(convert(&g, Dialect::Native).expect("identity"), g);
    }

    #[test]
    fn dense_as_batch_matmul_matches_source_bitwise() {
        let g = desk::tinynet_a();
        let converted = convert(&g, Dialect::DenseAsBatchMatmul).expect("convertible");
        assert_eq!(converted.dialect, Dialect::DenseAsBatchMatmul);
        assert!(converted.nodes.iter().all(|n| n.op != OpKind::Dense));
        assert!(converted.nodes.iter().any(|n| n.op == OpKind::BatchMatmul));
        let img = image("dbmm");
        assert_eq!(run(&converted, &img), run(&g, &img));
    }

    #[test]
    fn dense_as_batch_matmul_rejects_concat() {
        let err = convert(&desk::tinynet_b(), Dialect::DenseAsBatchMatmul).unwrap_err();
        assert!(matches!(
            err,
            VariantError::UnsupportedOp {
                dialect: Dialect::DenseAsBatchMatmul,
                op: OpKind::Concat
            }
        ));
    }

    #[test]
    fn pre_fused_batch_norm_folds_eagerly_within_tolerance() {
        let g = desk::tinynet_c();
        let converted = convert(&g, Dialect::PreFusedBatchNorm).expect("convertible");
        assert_eq!(converted.dialect, Dialect::PreFusedBatchNorm);
        let bns = converted
            .nodes
            .iter()
            .filter(|n| n.op == OpKind::BatchNorm)
            .count();
        assert_eq!(bns, 1, "only the scale BN after a ReLU survives");
        let img = image("prebn");
        let max_abs = run(&g, &img)
            .iter()
            .zip(run(&converted, &img))
            .map(|(&a, b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max);
        assert!(max_abs < 1e-6, "conversion drift {max_abs}");
    }

    #[test]
    fn convert_rejects_non_native_source() {
        let converted = convert(&desk::tinynet_a(), Dialect::DenseAsBatchMatmul).expect("ok");
        assert!(convert(&converted, Dialect::Native).is_err());
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let g = desk::tinynet_a();
        assert_eq!(inject_noise(&g, 0.0, 0.011, 7), g);
    }

    #[test]
    fn noise_statistics_match_the_calibration_targets() {
        let g = desk::tinynet_a();
        let noisy = inject_noise(&g, 3.75e-4, 0.011, 11);
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut max = 0.0f64;
        for (name, t) in &g.params {
            for (a, b) in t.data().iter().zip(noisy.params[name].data()) {
                let d = (*a as f64 - *b as f64).abs();
                total += d;
                max = max.max(d);
                count += 1;
            }
        }
        let mean = total / count as f64;
        let expected = 3.75e-4 * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean - expected).abs() < expected * 0.1,
            "mean {mean} vs expected {expected}"
        );
        assert!(max <= 0.011, "max {max} exceeds clamp");
        assert!(max > 1e-3, "clamp should actually bite occasionally: max {max}");
    }

    #[test]
    fn noise_is_deterministic_and_structure_preserving() {
        let g = desk::tinynet_b();
        let a = inject_noise(&g, 3.75e-4, 0.011, 5);
        let b = inject_noise(&g, 3.75e-4, 0.011, 5);
        assert_eq!(a, b);
        assert_eq!(a.nodes, g.nodes);
        assert_ne!(a.params, g.params);
        let c = inject_noise(&g, 3.75e-4, 0.011, 6);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn per_layer_override_scales_one_layer_only() {
        let g = desk::tinynet_a();
        let mut spec = NoiseSpec::new(1e-4, 1.0, 3);
        spec.per_layer.insert("head".into(), 4e-4);
        let noisy = inject_noise_spec(&g, &spec);
        let mean_abs = |name: &str| {
            let a = g.params[name].data();
            let b = noisy.params[name].data();
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum::<f64>()
                / a.len() as f64
        };
        let head = mean_abs("head.w");
        let conv = mean_abs("c2.w");
        assert!(
            head > conv * 2.5,
            "head override not applied: head {head} conv {conv}"
        );
    }

    #[test]
    fn repair_restores_noisy_parameters_bit_exactly() {
        let g = desk::tinynet_a();
        let noisy = inject_noise(&g, 3.75e-4, 0.011, 13);
        let repaired = repair_parameters(&noisy, &g).expect("names match");
        assert_eq!(repaired, g);
        assert_eq!(repair_parameters(&g, &g).expect("identity"), g);
    }

    #[test]
    fn repair_maps_transposed_dense_weights() {
        let g = desk::tinynet_a();
        let converted = convert(&g, Dialect::DenseAsBatchMatmul).expect("convertible");
        let noisy = inject_noise(&converted, 3.75e-4, 0.011, 17);
        let repaired = repair_parameters(&noisy, &g).expect("mappable");
        assert_eq!(repaired.params, converted.params);
        let img = image("repair");
        assert_eq!(run(&repaired, &img), run(&g, &img));
    }

    #[test]
    fn repair_refuses_pre_fused_graphs() {
        let g = desk::tinynet_a();
        let converted = convert(&g, Dialect::PreFusedBatchNorm).expect("convertible");
        assert!(matches!(
            repair_parameters(&converted, &g),
            Err(VariantError::ParamMapMismatch { .. })
        ));
    }

    #[test]
    fn enumerate_builds_the_cross_product_with_failures_recorded() {
        let config = ExperimentConfig {
            model: Some("tinynet-B".into()),
            dialects: vec![Dialect::Native, Dialect::DenseAsBatchMatmul],
            opt: OptConfig {
                levels: vec![OptLevel::Basic, OptLevel::Default, OptLevel::Extended],
                ..OptConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let set = enumerate_variants(&config).expect("valid config");
        assert_eq!(set.variants.len(), 3, "native x 3 levels");
        assert_eq!(set.failures.len(), 3, "dbmm x 3 levels all fail on Concat");
        for failure in &set.failures {
            assert!(failure.error.contains("Concat"), "{}", failure.error);
        }
        let ids: std::collections::BTreeSet<&str> = set
            .variants
            .iter()
            .map(|v| v.spec.id.as_str())
            .chain(set.failures.iter().map(|f| f.spec.id.as_str()))
            .collect();
        assert_eq!(ids.len(), 6, "variant ids are unique");
    }

    #[test]
    fn enumerate_defaults_to_native_basic_reference() {
        let config = ExperimentConfig {
            model: Some("tinynet-A".into()),
            ..ExperimentConfig::default()
        };
        let set = enumerate_variants(&config).expect("valid config");
        assert_eq!(set.variants.len(), 1);
        let v = &set.variants[0];
        assert_eq!(v.spec.dialect, Dialect::Native);
        assert_eq!(v.spec.level, OptLevel::Basic);
        assert_eq!(v.spec.backend, Backend::Reference);
        assert_eq!(v.spec.id, "tinynet-A-native-clean-basic-ref");
        assert!(set.failures.is_empty());
    }

    #[test]
    fn enumerate_with_noise_doubles_the_axis() {
        let config = ExperimentConfig {
            model: Some("tinynet-A".into()),
            noise: Some(NoiseSpec::new(3.75e-4, 0.011, 11)),
            ..ExperimentConfig::default()
        };
        let set = enumerate_variants(&config).expect("valid config");
        assert_eq!(set.variants.len(), 2, "clean + noisy");
        assert!(set.variants[0].spec.noise.is_none());
        assert!(set.variants[1].spec.noise.is_some());
        assert!(set.variants[1].spec.id.contains("-n11-"));
        assert_ne!(set.variants[0].graph, set.variants[1].graph);
    }

    #[test]
    fn enumerate_rejects_bad_configs() {
        let empty = ExperimentConfig::default();
        assert!(matches!(
            enumerate_variants(&empty),
            Err(VariantError::Config { .. })
        ));
        let bad_model = ExperimentConfig {
            model: Some("resnet152".into()),
            ..ExperimentConfig::default()
        };
        assert!(enumerate_variants(&bad_model).is_err());
        let bad_noise = ExperimentConfig {
            model: Some("tinynet-A".into()),
            noise: Some(NoiseSpec::new(-1.0, 0.011, 1)),
            ..ExperimentConfig::default()
        };
        assert!(matches!(
            enumerate_variants(&bad_noise),
            Err(VariantError::Config { .. })
        ));
    }

    #[test]
    fn variant_graphs_reflect_their_opt_level() {
        let config = ExperimentConfig {
            model: Some("tinynet-A".into()),
            opt: OptConfig {
                levels: vec![OptLevel::Basic, OptLevel::Extended],
                ..OptConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let set = enumerate_variants(&config).expect("valid config");
        let basic = &set.variants[0].graph;
        let extended = &set.variants[1].graph;
        assert!(basic.nodes.iter().all(|n| n.op != OpKind::FusedConvReLU));
        assert!(extended.nodes.iter().any(|n| n.op == OpKind::FusedConvReLU));
        assert!(extended.fast_math);
        assert!(!basic.fast_math);
    }
}
