//! Deterministic extractive summarizer.
//!
//! Sources are tokenized and concatenated in rank order. A token is dropped
//! when an earlier source already contributed it; repeats inside one source
//! are kept. Output is cut to `max_tokens` and joined with single spaces.
//! Refine mode treats the prediction as the first source.

use std::collections::HashSet;

use super::{RequestKind, SummarizationRequest, SummarizeError, SummarizerBackend};
use crate::fluency_filter::tokenize;

fn merge<'a, I>(sources: I, max_tokens: usize) -> String
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen: HashSet<String> = HashSet::new();
    let mut out: Vec<String> = Vec::new();
    'sources: for source in sources {
        let tokens = tokenize(source);
        for t in &tokens {
            if out.len() == max_tokens {
                break 'sources;
            }
            if !seen.contains(t) {
                out.push(t.clone());
            }
        }
        seen.extend(tokens);
    }
    out.join(" ")
}

pub fn extractive_summary<S: AsRef<str>>(descriptions: &[S], max_tokens: usize) -> String {
    merge(descriptions.iter().map(AsRef::as_ref), max_tokens)
}

pub fn extractive_refine<S: AsRef<str>>(prediction: &str, descriptions: &[S], max_tokens: usize) -> String {
    merge(
        std::iter::once(prediction).chain(descriptions.iter().map(AsRef::as_ref)),
        max_tokens,
    )
}

/// In-process backend for offline runs and CI. Ignores the seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveFallback;

impl SummarizerBackend for ExtractiveFallback {
    fn name(&self) -> String {
        "extractive-fallback".into()
    }

    fn generate(&self, request: &SummarizationRequest) -> Result<String, SummarizeError> {
        request.validate()?;
        let out = match request.kind {
            RequestKind::Summarize => extractive_summary(&request.descriptions, request.max_tokens),
            RequestKind::Refine => extractive_refine(
                request.prediction.as_deref().unwrap_or_default(),
                &request.descriptions,
                request.max_tokens,
            ),
        };
        if out.is_empty() {
            return Err(SummarizeError::Protocol {
                request_id: request.request_id.clone(),
                reason: "empty summary".into(),
            });
        }
        Ok(out)
    }
}
