//! Heatmap-based dense alignment for vision tasks.
//!
//! Every task (detection, grounding, segmentation, pose, counting) shares
//! one representation: a `grid x grid` heatmap matching an instruction to
//! image regions. This crate builds Gaussian heatmap targets, trains a small
//! attention aligner that predicts them from image and query embeddings,
//! decodes heatmaps into task outputs and scores those outputs with
//! COCO-style metrics.

pub mod aligner;
pub mod data;
pub mod decode;
pub mod encode;
pub mod error;
pub mod eval;
pub mod grid;
pub mod loss;
pub mod math;
pub mod pipeline;

pub use error::{Error, Result};
