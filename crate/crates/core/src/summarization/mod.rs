//! Pseudo-sentence generation behind a pluggable backend.
//!
//! Two request kinds: `summarize` turns one description group into a sentence,
//! `refine` rewrites the captioner's prediction with the image's top-k
//! descriptions. [`ExtractiveFallback`] answers both in-process and
//! deterministically; [`HttpBackend`] forwards them to a summarizer service.

mod fallback;
mod http;

use serde::{Deserialize, Serialize};

pub use fallback::{extractive_refine, extractive_summary, ExtractiveFallback};
pub use http::{
    BackendError as HttpBackendError, HealthResponse, HttpBackend, RefineBody, RetryPolicy,
    SummarizeBody, SummaryResponse, WireError, WireErrorBody,
};

pub const DEFAULT_MAX_TOKENS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Summarize,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummarizationRequest {
    /// Caller-chosen id carried into errors, e.g. `img42/c3`.
    pub request_id: String,
    pub kind: RequestKind,
    pub descriptions: Vec<String>,
    pub prediction: Option<String>,
    pub seed: u64,
    pub max_tokens: usize,
}

impl SummarizationRequest {
    pub fn summarize(request_id: impl Into<String>, descriptions: Vec<String>, seed: u64, max_tokens: usize) -> Self {
        Self {
            request_id: request_id.into(),
            kind: RequestKind::Summarize,
            descriptions,
            prediction: None,
            seed,
            max_tokens,
        }
    }

    pub fn refine(
        request_id: impl Into<String>,
        prediction: impl Into<String>,
        descriptions: Vec<String>,
        seed: u64,
        max_tokens: usize,
    ) -> Self {
        Self {
            request_id: request_id.into(),
            kind: RequestKind::Refine,
            descriptions,
            prediction: Some(prediction.into()),
            seed,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), SummarizeError> {
        let fail = |reason: &str| {
            Err(SummarizeError::Precondition {
                request_id: self.request_id.clone(),
                reason: reason.to_owned(),
            })
        };
        if self.descriptions.is_empty() {
            return fail("descriptions are empty");
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be positive");
        }
        match (self.kind, &self.prediction) {
            (RequestKind::Refine, None) => fail("refine requires a prediction"),
            (RequestKind::Summarize, Some(_)) => fail("summarize takes no prediction"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SummarizeError {
    #[error("request {request_id}: precondition failed: {reason}")]
    Precondition { request_id: String, reason: String },
    #[error("request {request_id}: backend failed after {attempts} attempts: {source}")]
    Backend {
        request_id: String,
        attempts: usize,
        #[source]
        source: HttpBackendError,
    },
    #[error("request {request_id}: protocol error: {reason}")]
    Protocol { request_id: String, reason: String },
}

impl SummarizeError {
    pub fn request_id(&self) -> &str {
        match self {
            Self::Precondition { request_id, .. }
            | Self::Backend { request_id, .. }
            | Self::Protocol { request_id, .. } => request_id,
        }
    }
}

pub trait SummarizerBackend: Send + Sync {
    /// Short name recorded in candidate provenance.
    fn name(&self) -> String;

    fn generate(&self, request: &SummarizationRequest) -> Result<String, SummarizeError>;
}

impl<B: SummarizerBackend + ?Sized> SummarizerBackend for &B {
    fn name(&self) -> String {
        (**self).name()
    }

    fn generate(&self, request: &SummarizationRequest) -> Result<String, SummarizeError> {
        (**self).generate(request)
    }
}

pub fn summarize_group(
    request: &SummarizationRequest,
    backend: &dyn SummarizerBackend,
) -> Result<String, SummarizeError> {
    if request.kind != RequestKind::Summarize {
        return Err(SummarizeError::Precondition {
            request_id: request.request_id.clone(),
            reason: "expected a summarize request".into(),
        });
    }
    request.validate()?;
    backend.generate(request)
}

pub fn refine(
    request: &SummarizationRequest,
    backend: &dyn SummarizerBackend,
) -> Result<String, SummarizeError> {
    if request.kind != RequestKind::Refine {
        return Err(SummarizeError::Precondition {
            request_id: request.request_id.clone(),
            reason: "expected a refine request".into(),
        });
    }
    request.validate()?;
    backend.generate(request)
}

/// Where a candidate came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Indices into the grouping plan (0 = head). Refined candidates list every group.
    pub groups: Vec<usize>,
    pub kind: RequestKind,
    pub backend: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub provenance: Provenance,
}

/// Candidates `c_1 .. c_{k/m}` from the groups, plus the refined one when
/// Stage-II ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoSentenceSet {
    pub image_id: String,
    pub candidates: Vec<Candidate>,
}

impl PseudoSentenceSet {
    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refine_without_prediction_is_rejected() {
        let mut req = SummarizationRequest::refine("r1", "a dog", vec!["grass".into()], 0, 20);
        req.prediction = None;
        let err = refine(&req, &ExtractiveFallback).unwrap_err();
        assert!(matches!(err, SummarizeError::Precondition { .. }));
        assert_eq!(err.request_id(), "r1");
    }

    #[test]
    fn empty_descriptions_rejected() {
        let req = SummarizationRequest::summarize("r2", vec![], 0, 20);
        assert!(summarize_group(&req, &ExtractiveFallback).is_err());
    }

    #[test]
    fn kind_mismatch_rejected() {
        let req = SummarizationRequest::summarize("r3", vec!["a".into()], 0, 20);
        assert!(refine(&req, &ExtractiveFallback).is_err());
    }
}
