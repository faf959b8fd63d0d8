//! Differential testing harness for neural-network inference graphs.
//!
//! The pipeline has three stages: variant generation (optimization levels,
//! simulated framework conversions, weight-noise injection), differential
//! execution over an image corpus, and analysis of label / timing / per-layer
//! divergences down to a localization verdict.

pub mod analysis;
pub mod exec;
pub mod ir;
pub mod opt;
pub mod tensor;
pub mod variant;
