//! Retrieval-augmented pseudo caption generation.
//!
//! Stages: exact cosine retrieval of descriptions per image, grouping of the
//! retrieved set into summarization groups, summarization and refinement
//! through a pluggable backend, and CIDEr-D based selection of one sentence
//! per image. `clip_guidance` and `metrics` cover the training loss and the
//! caption scorers used downstream.

pub mod clip_guidance;
pub mod embedding_store;
pub mod fluency_filter;
pub mod grouping;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod sentence_embedder;
pub mod summarization;
pub mod synthetic;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
