//! Bundled desk models: three miniature 10-class architectures with
//! deterministic seeded parameters.
//!
//! * `tinynet-A`: plain convolutional stack (conv blocks + dense head).
//! * `tinynet-B`: parallel branches joined by Concat, plus a parallel pair of
//!   Dense layers; the Concat makes some dialect conversions fail by design.
//! * `tinynet-C`: residual adds, a pure-scale BatchNorm, a duplicated
//!   subexpression, and a Dense→ReLU head, giving every optimization pass
//!   something to chew on.
//!
//! Parameter values come from the counter-based generator keyed by
//! (model seed, parameter name, element index), so the models are identical
//! on every machine. Layer weight scales are deliberately super-unit so
//! perturbations grow layer over layer; tinynet-A's first layer is a
//! bias-free 1x1 conv over small-amplitude pixels so its activation diff
//! under weight noise stays small relative to downstream layers.

use std::collections::BTreeMap;

use crate::tensor::{Padding, Tensor};
use crate::variant::rng;

use super::{Attrs, Dialect, GraphInput, ModelGraph, Node, OpKind, ValueRef};

pub const TINYNET_A_SEED: u64 = 0xA001;
pub const TINYNET_B_SEED: u64 = 0xB002;
pub const TINYNET_C_SEED: u64 = 0xC003;

/// The ten desk class labels, alphabetical.
pub const CLASS_LABELS: [&str; 10] = [
    "albatross",
    "bicycle",
    "castle",
    "dalmatian",
    "espresso",
    "firetruck",
    "giraffe",
    "harmonica",
    "iceberg",
    "jellyfish",
];

/// Desk input geometry: one 3-channel 16x16 image per record.
pub const INPUT_SHAPE: [usize; 4] = [1, 3, 16, 16];

pub fn desk_models() -> Vec<ModelGraph> {
    vec![tinynet_a(), tinynet_b(), tinynet_c()]
}

pub fn desk_model(name: &str) -> Option<ModelGraph> {
    match name {
        "tinynet-A" => Some(tinynet_a()),
        "tinynet-B" => Some(tinynet_b()),
        "tinynet-C" => Some(tinynet_c()),
        _ => None,
    }
}

struct Builder {
    seed: u64,
    nodes: Vec<Node>,
    params: BTreeMap<String, Tensor>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            seed,
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn gaussian(&mut self, name: &str, shape: Vec<usize>, std: f64, shift: f64) -> String {
        let key = rng::stream_key(self.seed, name);
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|i| (rng::gaussian(key, i as u64) * std + shift) as f32)
            .collect();
        self.params.insert(
            name.to_string(),
            Tensor::new(shape, data).expect("valid param shape"),
        );
        name.to_string()
    }

    fn uniform(&mut self, name: &str, shape: Vec<usize>, lo: f64, hi: f64) -> String {
        let key = rng::stream_key(self.seed, name);
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|i| (lo + (hi - lo) * rng::uniform(key, i as u64)) as f32)
            .collect();
        self.params.insert(
            name.to_string(),
            Tensor::new(shape, data).expect("valid param shape"),
        );
        name.to_string()
    }

    fn exact(&mut self, name: &str, shape: Vec<usize>, value: f32) -> String {
        self.params.insert(
            name.to_string(),
            Tensor::filled(shape, value).expect("valid param shape"),
        );
        name.to_string()
    }

    fn push(&mut self, op: OpKind, attrs: Attrs, params: Vec<String>, inputs: Vec<ValueRef>) -> ValueRef {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            op,
            attrs,
            params,
            inputs,
        });
        ValueRef::Node(id)
    }

    fn conv(
        &mut self,
        prefix: &str,
        input: ValueRef,
        in_c: usize,
        out_c: usize,
        k: usize,
        w_std: f64,
        bias: bool,
    ) -> ValueRef {
        let mut params = vec![self.gaussian(
            &format!("{prefix}.w"),
            vec![out_c, in_c, k, k],
            w_std,
            0.0,
        )];
        if bias {
            params.push(self.gaussian(&format!("{prefix}.b"), vec![out_c], 0.003, 0.0));
        }
        self.push(
            OpKind::Conv2D,
            Attrs::conv((1, 1), Padding::Same),
            params,
            vec![input],
        )
    }

    fn bn(&mut self, prefix: &str, input: ValueRef, channels: usize) -> ValueRef {
        let params = vec![
            self.gaussian(&format!("{prefix}.gamma"), vec![channels], 0.05, 1.0),
            self.gaussian(&format!("{prefix}.beta"), vec![channels], 0.01, 0.0),
            self.gaussian(&format!("{prefix}.mean"), vec![channels], 0.01, 0.0),
            self.uniform(&format!("{prefix}.var"), vec![channels], 0.9, 1.1),
        ];
        self.push(
            OpKind::BatchNorm,
            Attrs {
                epsilon: Some(1e-5),
                ..Attrs::default()
            },
            params,
            vec![input],
        )
    }

    /// BatchNorm that is exactly a per-channel scale: beta = mean = 0,
    /// var = 1, epsilon = 0, gamma near 1.
    fn scale_bn(&mut self, prefix: &str, input: ValueRef, channels: usize) -> ValueRef {
        let params = vec![
            self.uniform(&format!("{prefix}.gamma"), vec![channels], 0.9, 1.1),
            self.exact(&format!("{prefix}.beta"), vec![channels], 0.0),
            self.exact(&format!("{prefix}.mean"), vec![channels], 0.0),
            self.exact(&format!("{prefix}.var"), vec![channels], 1.0),
        ];
        self.push(
            OpKind::BatchNorm,
            Attrs {
                epsilon: Some(0.0),
                ..Attrs::default()
            },
            params,
            vec![input],
        )
    }

    fn relu(&mut self, input: ValueRef) -> ValueRef {
        self.push(OpKind::ReLU, Attrs::default(), vec![], vec![input])
    }

    fn maxpool(&mut self, input: ValueRef, k: usize, stride: usize) -> ValueRef {
        self.push(
            OpKind::MaxPool,
            Attrs::pool((k, k), (stride, stride), Padding::Same),
            vec![],
            vec![input],
        )
    }

    fn dense(
        &mut self,
        prefix: &str,
        input: ValueRef,
        in_f: usize,
        out_f: usize,
        w_std: f64,
    ) -> ValueRef {
        let params = vec![
            self.gaussian(&format!("{prefix}.w"), vec![out_f, in_f], w_std, 0.0),
            self.gaussian(&format!("{prefix}.b"), vec![out_f], 0.003, 0.0),
        ];
        self.push(OpKind::Dense, Attrs::default(), params, vec![input])
    }

    fn finish(self, name: &str, outputs: Vec<usize>) -> ModelGraph {
        let graph = ModelGraph {
            name: name.to_string(),
            dialect: Dialect::Native,
            fast_math: false,
            inputs: vec![GraphInput {
                name: "image".into(),
                shape: INPUT_SHAPE.to_vec(),
            }],
            nodes: self.nodes,
            outputs,
            labels: CLASS_LABELS.iter().map(|s| s.to_string()).collect(),
            params: self.params,
        };
        graph.validate().expect("desk model is valid by construction");
        graph.infer_shapes().expect("desk model shapes are consistent");
        graph
    }
}

/// Plain conv stack: 1x1 conv → BN → ReLU → pool, two 3x3 blocks, global
/// average pool, dense head, softmax. 14 nodes, output 1x10.
pub fn tinynet_a() -> ModelGraph {
    let mut b = Builder::new(TINYNET_A_SEED);
    let image = ValueRef::Input("image".into());

    let c1 = b.conv("c1", image, 3, 8, 1, 4.0, false);
    let x = b.bn("bn1", c1, 8);
    let x = b.relu(x);
    let x = b.maxpool(x, 2, 2);

    let x = b.conv("c2", x, 8, 16, 3, 0.35, true);
    let x = b.bn("bn2", x, 16);
    let x = b.relu(x);
    let x = b.maxpool(x, 2, 2);

    let x = b.conv("c3", x, 16, 32, 3, 0.25, true);
    let x = b.bn("bn3", x, 32);
    let x = b.relu(x);

    let x = b.push(OpKind::GlobalAvgPool, Attrs::default(), vec![], vec![x]);
    let x = b.dense("head", x, 32, 10, 0.35);
    let out = b.push(OpKind::Softmax, Attrs::default(), vec![], vec![x]);

    let out_id = out.node_id().expect("node ref");
    b.finish("tinynet-A", vec![out_id])
}

/// Branchy net: stem, a constant-pair Add, three parallel branches joined by
/// Concat, then a parallel Dense pair joined by a second Concat.
pub fn tinynet_b() -> ModelGraph {
    let mut b = Builder::new(TINYNET_B_SEED);
    let image = ValueRef::Input("image".into());

    let x = b.conv("stem", image, 3, 8, 3, 1.5, true);
    let x = b.bn("bnstem", x, 8);
    let x = b.relu(x);
    let pooled = b.maxpool(x, 2, 2);

    // Constant-only subgraph: Add(biasA, biasB) folds to one Constant.
    let bias_a = b.gaussian("biasA", vec![8], 0.02, 0.0);
    let bias_b = b.gaussian("biasB", vec![8], 0.02, 0.0);
    let ca = b.push(OpKind::Constant, Attrs::default(), vec![bias_a], vec![]);
    let cb = b.push(OpKind::Constant, Attrs::default(), vec![bias_b], vec![]);
    let bias_sum = b.push(OpKind::Add, Attrs::default(), vec![], vec![ca, cb]);
    let trunk = b.push(
        OpKind::Add,
        Attrs::default(),
        vec![],
        vec![pooled, bias_sum],
    );

    // Two same-shape 3x3 branches (combinable once fused) and a pool branch.
    let b1 = b.conv("b1", trunk.clone(), 8, 8, 3, 0.45, true);
    let b1 = b.relu(b1);
    let b2 = b.conv("b2", trunk.clone(), 8, 8, 3, 0.45, true);
    let b2 = b.relu(b2);
    let p3 = b.maxpool(trunk, 3, 1);
    let b3 = b.conv("b3", p3, 8, 8, 1, 0.9, true);
    let b3 = b.relu(b3);
    let joined = b.push(
        OpKind::Concat,
        Attrs {
            axis: Some(1),
            ..Attrs::default()
        },
        vec![],
        vec![b1, b2, b3],
    );

    let x = b.maxpool(joined, 2, 2);
    let x = b.push(OpKind::GlobalAvgPool, Attrs::default(), vec![], vec![x]);

    // Parallel Dense pair feeding a Concat (combinable into a batch matmul).
    let da = b.dense("da", x.clone(), 24, 8, 0.55);
    let db = b.dense("db", x, 24, 8, 0.55);
    let cat = b.push(
        OpKind::Concat,
        Attrs {
            axis: Some(1),
            ..Attrs::default()
        },
        vec![],
        vec![da, db],
    );

    let x = b.dense("head", cat, 16, 10, 0.8);
    let out = b.push(OpKind::Softmax, Attrs::default(), vec![], vec![x]);

    let out_id = out.node_id().expect("node ref");
    b.finish("tinynet-B", vec![out_id])
}

/// Residual net: two residual blocks with a pure-scale BatchNorm between
/// them, a duplicated GlobalAvgPool pair, and a Dense→ReLU→Dense head. The
/// residual Adds list their operands in descending id order so operand
/// canonicalization has something to normalize.
pub fn tinynet_c() -> ModelGraph {
    let mut b = Builder::new(TINYNET_C_SEED);
    let image = ValueRef::Input("image".into());

    let x = b.conv("stem", image, 3, 16, 3, 1.2, true);
    let x = b.bn("bn0", x, 16);
    let x = b.relu(x);
    let skip1 = b.maxpool(x, 2, 2);

    let x = b.conv("r1c1", skip1.clone(), 16, 16, 3, 0.3, true);
    let x = b.bn("r1bn1", x, 16);
    let x = b.relu(x);
    let x = b.conv("r1c2", x, 16, 16, 3, 0.3, true);
    let x = b.bn("r1bn2", x, 16);
    let sum1 = b.push(OpKind::Add, Attrs::default(), vec![], vec![x, skip1]);
    let skip2 = b.relu(sum1);

    let scaled = b.scale_bn("scale", skip2.clone(), 16);
    let x = b.conv("r2c1", scaled, 16, 16, 3, 0.3, true);
    let x = b.bn("r2bn1", x, 16);
    let x = b.relu(x);
    let x = b.conv("r2c2", x, 16, 16, 3, 0.3, true);
    let x = b.bn("r2bn2", x, 16);
    let sum2 = b.push(OpKind::Add, Attrs::default(), vec![], vec![x, skip2]);
    let x = b.relu(sum2);

    // Duplicated subexpression: two identical pools, merged by CSE.
    let gap1 = b.push(OpKind::GlobalAvgPool, Attrs::default(), vec![], vec![x.clone()]);
    let gap2 = b.push(OpKind::GlobalAvgPool, Attrs::default(), vec![], vec![x]);
    let x = b.push(OpKind::Add, Attrs::default(), vec![], vec![gap1, gap2]);

    let x = b.dense("fc1", x, 16, 12, 0.6);
    let x = b.relu(x);
    let x = b.dense("fc2", x, 12, 10, 0.7);
    let out = b.push(OpKind::Softmax, Attrs::default(), vec![], vec![x]);

    let out_id = out.node_id().expect("node ref");
    b.finish("tinynet-C", vec![out_id])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_models_validate_and_output_ten_classes() {
        for g in desk_models() {
            let shapes = g.output_shapes().expect("shapes");
            assert_eq!(shapes, vec![vec![1, 10]], "{}", g.name);
            assert_eq!(g.labels.len(), 10);
            assert!(g.nodes.iter().all(|n| {
                n.op != OpKind::FusedConvReLU && n.op != OpKind::FusedDenseReLU
            }));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(tinynet_a(), tinynet_a());
        assert_eq!(tinynet_b(), tinynet_b());
        assert_eq!(tinynet_c(), tinynet_c());
    }

    #[test]
    fn models_are_distinct_and_named() {
        let names: Vec<String> = desk_models().into_iter().map(|g| g.name).collect();
        assert_eq!(names, vec!["tinynet-A", "tinynet-B", "tinynet-C"]);
        assert!(desk_model("tinynet-A").is_some());
        assert!(desk_model("resnet101").is_none());
    }

    #[test]
    fn tinynet_b_contains_concat_and_c_contains_residual_add() {
        let b = tinynet_b();
        assert!(b.nodes.iter().any(|n| n.op == OpKind::Concat));
        let c = tinynet_c();
        let adds = c.nodes.iter().filter(|n| n.op == OpKind::Add).count();
        assert!(adds >= 2, "expected residual adds, found {adds}");
    }

    #[test]
    fn pure_scale_bn_params_are_exact() {
        let c = tinynet_c();
        assert!(c.params["scale.beta"].data().iter().all(|&v| v == 0.0));
        assert!(c.params["scale.mean"].data().iter().all(|&v| v == 0.0));
        assert!(c.params["scale.var"].data().iter().all(|&v| v == 1.0));
        assert!(c.params["scale.gamma"].data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().expect("tempdir");
        for g in desk_models() {
            let path = dir.path().join(format!("{}.json", g.name));
            super::super::save_model(&g, &path).expect("save");
            assert_eq!(super::super::load_model(&path).expect("load"), g);
        }
    }
}
