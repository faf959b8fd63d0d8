//! Model on-disk format: JSON manifest plus DTNS weights sidecar.
//!
//! The manifest carries structure and metadata; parameters live next to it in
//! `<stem>.weights`. Serialization is byte-stable: struct field order is
//! fixed and the sidecar is sorted by parameter name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::io;

use super::{Attrs, Dialect, GraphError, GraphInput, ModelGraph, Node, OpKind, ValueRef};

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    dialect: Dialect,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    fast_math: bool,
    inputs: Vec<GraphInput>,
    nodes: Vec<RawNode>,
    outputs: Vec<usize>,
    labels: Vec<String>,
}

/// Node with the op kind as a plain string, so unknown ops surface as
/// [`GraphError::UnsupportedOp`] rather than a generic parse failure.
#[derive(Serialize, Deserialize)]
struct RawNode {
    id: usize,
    op: String,
    #[serde(default, skip_serializing_if = "Attrs::is_empty")]
    attrs: Attrs,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    params: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<ValueRef>,
}

/// Sidecar path next to the manifest: `model.json` -> `model.weights`.
pub fn weights_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("weights")
}

/// The manifest serialized to its canonical JSON text.
pub fn manifest_json(graph: &ModelGraph) -> String {
    let manifest = Manifest {
        name: graph.name.clone(),
        dialect: graph.dialect,
        fast_math: graph.fast_math,
        inputs: graph.inputs.clone(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id,
                op: n.op.as_str().to_string(),
                attrs: n.attrs.clone(),
                params: n.params.clone(),
                inputs: n.inputs.clone(),
            })
            .collect(),
        outputs: graph.outputs.clone(),
        labels: graph.labels.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

pub fn save_model(graph: &ModelGraph, manifest_path: &Path) -> Result<(), GraphError> {
    graph.validate()?;
    std::fs::write(manifest_path, manifest_json(graph)).map_err(io::IoError::from)?;
    io::save_weights(&weights_path(manifest_path), &graph.params)?;
    Ok(())
}

pub fn load_model(manifest_path: &Path) -> Result<ModelGraph, GraphError> {
    let text = std::fs::read_to_string(manifest_path).map_err(io::IoError::from)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| GraphError::Parse(e.to_string()))?;
    let params = io::load_weights(&weights_path(manifest_path))?;
    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    for raw in manifest.nodes {
        let op: OpKind = raw.op.parse()?;
        nodes.push(Node {
            id: raw.id,
            op,
            attrs: raw.attrs,
            params: raw.params,
            inputs: raw.inputs,
        });
    }
    let graph = ModelGraph {
        name: manifest.name,
        dialect: manifest.dialect,
        fast_math: manifest.fast_math,
        inputs: manifest.inputs,
        nodes,
        outputs: manifest.outputs,
        labels: manifest.labels,
        params,
    };
    graph.validate()?;
    graph.infer_shapes()?;
    Ok(graph)
}
