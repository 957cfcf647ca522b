//! Two-stream windowed-attention salient object detection.
//!
//! A self-contained implementation of an RGB-D / RGB-T salient object
//! detection pipeline: a minimal autodiff tensor engine, two hierarchical
//! windowed-attention encoder streams, cross-modality fusion by spatial
//! alignment and channel re-calibration, an edge-aware module over the
//! shallow depth features, an edge-guided top-down decoder, dual
//! cross-entropy training with Adam, the standard saliency evaluation
//! metric suite, and batch tooling (train / infer / eval / complexity).
//!
//! See the crate examples for runnable entry points per capability, and the
//! `swinnet` binary for the batch CLI.

// the numeric kernels index several buffers from one loop variable on
// purpose; rewriting them around iterators hurts readability
#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod cli;
pub mod complexity;
pub mod dataio;
pub mod decoder;
pub mod edge;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sacr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
