//! Few-shot phase recognition over frozen vision-language embeddings.
//!
//! The pipeline trains a text-blended linear classifier on a handful of
//! labelled frames, learns a diffusion prior over phase sequences sampled
//! from a task graph, and at inference adapts two linear adapters per video
//! by making three prediction streams agree before fusing them and refining
//! the fused sequence with the diffusion prior.

pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod fewshot;
pub mod metrics;
pub mod pipeline;
pub mod probs;
pub mod synth;
pub mod task_graph;
pub mod tta;

pub use error::{Result, SpaError};
