//! Dense f32 tensors and the primitive operator kernels the interpreter
//! dispatches to.
//!
//! Tensors are immutable values once constructed and safe to share read-only
//! across workers. Every kernel is a pure function with a fixed accumulation
//! order, so "bit-exact" is a meaningful contract: identical inputs produce
//! bit-identical outputs regardless of backend or thread count.
//!
//! Layout convention: 4-D activation tensors are NCHW (batch, channel,
//! height, width); buffers are row-major.

mod kernels;
pub mod io;

pub use kernels::{
    add, avgpool, batch_matmul, batchnorm, concat, conv2d, conv2d_blocked, dense, dense_blocked,
    global_avg_pool, maxpool, poly_exp, relu, reshape, softmax,
};
pub(crate) use kernels::out_extent;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: stride components must be >= 1")]
    InvalidStride { op: &'static str },
    #[error("batchnorm: variance + epsilon must be > 0 (epsilon {epsilon})")]
    InvalidEpsilon { epsilon: f32 },
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
}

impl TensorError {
    pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

/// Spatial padding rule for convolution and pooling windows.
///
/// `Same` preserves `ceil(extent / stride)` and pads symmetrically with the
/// extra pixel on the bottom/right; `Valid` only visits fully in-bounds
/// windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Dense rank-N array of f32 with an explicit shape.
///
/// Invariants enforced at construction: rank >= 1, every extent >= 1, and
/// `shape.product() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let count = checked_len(&shape)?;
        if count != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("shape implies {count} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let count = checked_len(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; count],
        })
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self, TensorError> {
        let count = checked_len(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; count],
        })
    }

    /// Rank-1 tensor from a value slice.
    pub fn from_vec(data: Vec<f32>) -> Result<Self, TensorError> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1 invariant")
    }

    /// Bitwise equality of shape and payload (NaN-safe, unlike `PartialEq`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Same data, new shape; element count must match.
    pub fn with_shape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }
}

fn checked_len(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be >= 1".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "every extent must be >= 1".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_count_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).expect_err("5 != 6");
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn new_rejects_zero_extent_and_rank_zero() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn bit_eq_distinguishes_negative_zero() {
        let a = Tensor::from_vec(vec![0.0]).unwrap();
        let b = Tensor::from_vec(vec![-0.0]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn with_shape_checks_count() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.with_shape(vec![2, 2]).unwrap().shape(), &[2, 2]);
        assert!(t.with_shape(vec![3, 2]).is_err());
    }
}
