//! End-to-end orchestration: retrieve, group, summarize, refine, filter.
//!
//! Per-image work runs on a bounded thread pool; records are always written
//! in input image order by a single writer, so output bytes do not depend on
//! scheduling. A failing image is recorded in the dataset and the manifest
//! without touching any other image's record.

mod config;
mod manifest;
mod records;
mod run;

pub use config::{BackendChoice, PipelineConfig, BACKEND_ENV};
pub use manifest::{
    now_ms, sha256_bytes, sha256_file, FileDigest, ImageState, ImageStatus, RunManifest,
    MANIFEST_FILE,
};
pub use records::{
    parse_jsonl, read_jsonl, to_jsonl, write_atomic, write_jsonl, DatasetRecord, FilterOutcome,
    ImageFailure, ImageRecord, PredictionRecord, Predictions, Stage,
};
pub use run::{
    backend_from_config, embedder_from_config, request_seed, resume, resume_with, run_pipeline,
    run_pipeline_with, RunReport, OUTPUT_FILES,
};

use crate::embedding_store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("refusing to resume: {0}")]
    Resume(String),
    #[error("image {image_id} failed at {stage}: {message}")]
    ImageFailed {
        image_id: String,
        stage: Stage,
        message: String,
        backend: bool,
    },
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        Self::Input(e.to_string())
    }
}

impl PipelineError {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Resume(_) => 1,
            Self::Input(_) | Self::Io(_) => 2,
            Self::Backend(_) => 3,
            Self::ImageFailed { backend: true, .. } => 3,
            Self::ImageFailed { backend: false, .. } => 4,
        }
    }
}
