//! Co-saliency detection over image groups.
//!
//! The pipeline: a small three-stage encoder extracts multi-scale features
//! from a group of N images, an FPN fuses them top-down, an adaptive graph
//! convolutional network (AGCN) smooths node features over a learned dense
//! group graph, an attention graph clustering module (AGCM) separates the
//! group-common foreground from everything else, and a decoder upsamples the
//! fused features back to per-image co-saliency maps. Everything trains
//! end-to-end with reverse-mode autodiff on plain f64 tensors.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
