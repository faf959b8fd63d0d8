//! Corpus handling and the bundled desk corpus.
//!
//! On disk a corpus is a directory of `<image-id>.dtns` tensors plus
//! `labels.csv` (`image_id,label_index`); the CSV row order defines corpus
//! order. The generated desk corpus is 60 random images plus 4 decision-
//! boundary interpolants sitting at fixed, small top-2 score gaps of
//! tinynet-A, so small parameter perturbations can flip their labels.

use std::collections::BTreeMap;
use std::path::Path;

use crate::ir::desk;
use crate::tensor::{io as tio, Tensor};
use crate::variant::rng;

use super::{argmax, backend_execute, Backend, ExecError};

pub const CORPUS_SEED: u64 = 0xD47A;
/// Peak pixel amplitude: each pixel is a per-channel DC offset (uniform in
/// +-DC_SCALE, shared by the whole plane) plus per-pixel texture (uniform in
/// +-TEXTURE_SCALE). The DC component survives global average pooling and
/// drives diverse class predictions; the small overall amplitude keeps the
/// first conv layer's response to weight noise small.
pub const PIXEL_SCALE: f64 = DC_SCALE + TEXTURE_SCALE;
pub const DC_SCALE: f64 = 0.045;
pub const TEXTURE_SCALE: f64 = 0.015;
/// Top-1/top-2 score gaps targeted by the four boundary interpolants.
pub const BOUNDARY_GAPS: [f64; 4] = [4e-4, 8e-4, 1.5e-3, 3e-3];
pub const RANDOM_IMAGES: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// (image id, tensor) in corpus order.
    pub images: Vec<(String, Tensor)>,
    /// Ground-truth class index per image id.
    pub labels: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.images
            .iter()
            .find(|(name, _)| name == id)
            .map(|(_, t)| t)
    }
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<(), ExecError> {
    std::fs::create_dir_all(dir).map_err(ExecError::io)?;
    let mut csv = String::from("image_id,label_index\n");
    for (id, tensor) in &corpus.images {
        let label = corpus
            .labels
            .get(id)
            .ok_or_else(|| ExecError::corpus(format!("image '{id}' has no label")))?;
        csv.push_str(&format!("{id},{label}\n"));
        tio::save_tensor(&dir.join(format!("{id}.dtns")), tensor)
            .map_err(|e| ExecError::corpus(e.to_string()))?;
    }
    std::fs::write(dir.join("labels.csv"), csv).map_err(ExecError::io)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, ExecError> {
    let csv_path = dir.join("labels.csv");
    let text = std::fs::read_to_string(&csv_path)
        .map_err(|e| ExecError::corpus(format!("{}: {e}", csv_path.display())))?;
    let mut images = Vec::new();
    let mut labels = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "image_id,label_index") {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| {
            ExecError::corpus(format!("labels.csv line {}: expected 'id,index'", i + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            ExecError::corpus(format!("labels.csv line {}: bad label index '{label}'", i + 1))
        })?;
        let tensor = tio::load_tensor(&dir.join(format!("{id}.dtns")))
            .map_err(|e| ExecError::corpus(format!("image '{id}': {e}")))?;
        if labels.insert(id.to_string(), label).is_some() {
            return Err(ExecError::corpus(format!("duplicate image id '{id}'")));
        }
        images.push((id.to_string(), tensor));
    }
    if images.is_empty() {
        return Err(ExecError::corpus("corpus is empty"));
    }
    Ok(Corpus { images, labels })
}

fn random_image(id: &str) -> Tensor {
    let key = rng::stream_key(CORPUS_SEED, id);
    let len: usize = desk::INPUT_SHAPE.iter().product();
    let plane = desk::INPUT_SHAPE[2] * desk::INPUT_SHAPE[3];
    let dc: Vec<f64> = (0..desk::INPUT_SHAPE[1])
        .map(|c| (rng::uniform(key, (len + c) as u64) * 2.0 - 1.0) * DC_SCALE)
        .collect();
    let data = (0..len)
        .map(|i| {
            let tex = (rng::uniform(key, i as u64) * 2.0 - 1.0) * TEXTURE_SCALE;
            (dc[i / plane] + tex) as f32
        })
        .collect();
    Tensor::new(desk::INPUT_SHAPE.to_vec(), data).expect("valid image shape")
}

fn blend(a: &Tensor, b: &Tensor, t: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((1.0 - t) * x as f64 + t * y as f64) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Top-1 scores of the clean reference model for one image.
fn scores(reference: &crate::ir::ModelGraph, image: &Tensor) -> Vec<f32> {
    backend_execute(reference, image, Backend::Reference)
        .expect("desk model executes")
        .into_data()
}

/// Signed margin of class `class`: its score minus the best other score.
/// Positive iff `class` is the top-1.
fn signed_gap(scores: &[f32], class: usize) -> f64 {
    let own = scores[class] as f64;
    let best_other = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != class)
        .map(|(_, &s)| s as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    own - best_other
}

/// The bundled 64-image desk corpus: 60 random images labeled by clean
/// tinynet-A, plus 4 interpolants bisected onto its decision boundary at the
/// [`BOUNDARY_GAPS`] margins.
pub fn generate_desk_corpus() -> Corpus {
    let reference = desk::tinynet_a();
    let mut images = Vec::with_capacity(RANDOM_IMAGES + BOUNDARY_GAPS.len());
    let mut labels = BTreeMap::new();
    for i in 0..RANDOM_IMAGES {
        let id = format!("img{i:03}");
        let image = random_image(&id);
        let label = argmax(&scores(&reference, &image));
        labels.insert(id.clone(), label);
        images.push((id, image));
    }

    // Pair up differently-labeled random images for the interpolants.
    let mut pairs = Vec::new();
    let mut cursor = 0;
    while pairs.len() < BOUNDARY_GAPS.len() && cursor + 1 < images.len() {
        let (ida, _) = &images[cursor];
        let (idb, _) = &images[cursor + 1];
        if labels[ida] != labels[idb] {
            pairs.push((cursor, cursor + 1));
        }
        cursor += 2;
    }
    assert_eq!(
        pairs.len(),
        BOUNDARY_GAPS.len(),
        "not enough differently-labeled pairs in the random corpus"
    );

    for (edge, (&gap, &(ia, ib))) in BOUNDARY_GAPS.iter().zip(&pairs).enumerate() {
        let a = images[ia].1.clone();
        let b = images[ib].1.clone();
        let class_a = labels[&images[ia].0];
        // h(t) = signed_gap - target is positive at t=0 (label a, healthy
        // margin) and negative at t=1 (label b), so bisection lands on a
        // point where class_a still wins by about `gap`.
        let h = |t: f64| signed_gap(&scores(&reference, &blend(&a, &b, t)), class_a) - gap;
        assert!(h(0.0) > 0.0, "pair margin smaller than boundary target");
        assert!(h(1.0) < 0.0);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let image = blend(&a, &b, lo);
        let label = argmax(&scores(&reference, &image));
        let id = format!("edge{edge:03}");
        labels.insert(id.clone(), label);
        images.push((id, image));
    }

    Corpus { images, labels }
}

/// Small random corpus for unit tests; labels come from clean tinynet-A.
#[cfg(test)]
pub(crate) fn synthetic_corpus(n: usize) -> Corpus {
    let reference = desk::tinynet_a();
    let mut images = Vec::with_capacity(n);
    let mut labels = BTreeMap::new();
    for i in 0..n {
        let id = format!("t{i:03}");
        let image = random_image(&id);
        let label = argmax(&scores(&reference, &image));
        labels.insert(id.clone(), label);
        images.push((id, image));
    }
    Corpus { images, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().expect("tempdir");
        let corpus = synthetic_corpus(3);
        save_corpus(dir.path(), &corpus).expect("save");
        let back = load_corpus(dir.path()).expect("load");
        assert_eq!(back, corpus);
    }

    #[test]
    fn load_rejects_missing_file_and_bad_rows() {
        let dir = tempfile::tempdir().expect("tempdir");
        std::fs::write(dir.path().join("labels.csv"), "image_id,label_index\nghost,0\n")
            .unwrap();
        assert!(matches!(
            load_corpus(dir.path()),
            Err(ExecError::Corpus { .. })
        ));

        std::fs::write(dir.path().join("labels.csv"), "image_id,label_index\nbad row\n")
            .unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    #[test]
    fn desk_corpus_is_deterministic_and_sized() {
        let c1 = generate_desk_corpus();
        assert_eq!(c1.len(), RANDOM_IMAGES + BOUNDARY_GAPS.len());
        let c2 = generate_desk_corpus();
        assert_eq!(c1, c2);
        for (id, t) in &c1.images {
            assert_eq!(t.shape(), desk::INPUT_SHAPE, "{id}");
        }
    }

    #[test]
    fn boundary_images_sit_at_their_target_gaps() {
        let corpus = generate_desk_corpus();
        let reference = desk::tinynet_a();
        for (i, &target) in BOUNDARY_GAPS.iter().enumerate() {
            let id = format!("edge{i:03}");
            let image = corpus.get(&id).expect("edge image present");
            let s = scores(&reference, image);
            let gap = signed_gap(&s, corpus.labels[&id]);
            assert!(
                gap > 0.0 && (gap - target).abs() < target * 0.5,
                "{id}: gap {gap} vs target {target}"
            );
        }
    }
}
