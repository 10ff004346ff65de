//! Client for the summarizer wire protocol.
//!
//! `POST /v1/summarize`, `POST /v1/refine` and `GET /v1/health`, JSON bodies.
//! Transport failures, 429 and 5xx are retried with exponential backoff; other
//! 4xx responses and malformed bodies fail immediately.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{RequestKind, SummarizationRequest, SummarizeError, SummarizerBackend};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarizeBody {
    pub descriptions: Vec<String>,
    pub seed: u64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineBody {
    pub prediction: String,
    pub descriptions: Vec<String>,
    pub seed: u64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireErrorBody {
    pub error: WireError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub mode: String,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http {status}: {code}: {message}")]
    Status {
        status: u16,
        code: String,
        message: String,
    },
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        match self {
            Self::Transport(_) => true,
            Self::Status { status, .. } => *status == 429 || *status >= 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
            timeout: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: usize) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1) as u32)
    }
}

pub struct HttpBackend {
    base_url: String,
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, policy: RetryPolicy) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(policy.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            client,
            policy,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn health(&self) -> Result<HealthResponse, BackendError> {
        let resp = self
            .client
            .get(format!("{}/v1/health", self.base_url))
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(status_error(status, &text));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Transport(format!("bad health body: {e}")))
    }

    fn post_once(&self, path: &str, body: &serde_json::Value) -> Result<Result<String, String>, BackendError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base_url))
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(status_error(status, &text));
        }
        // Outer Ok: the exchange completed. Inner Err: the body broke the protocol.
        Ok(match serde_json::from_str::<SummaryResponse>(&text) {
            Ok(r) if r.summary.trim().is_empty() => Err("empty summary".to_owned()),
            Ok(r) => Ok(r.summary),
            Err(e) => Err(format!("malformed response body: {e}")),
        })
    }
}

fn status_error(status: u16, text: &str) -> BackendError {
    match serde_json::from_str::<WireErrorBody>(text) {
        Ok(b) => BackendError::Status {
            status,
            code: b.error.code,
            message: b.error.message,
        },
        Err(_) => BackendError::Status {
            status,
            code: "unknown".into(),
            message: text.chars().take(200).collect(),
        },
    }
}

impl SummarizerBackend for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn generate(&self, request: &SummarizationRequest) -> Result<String, SummarizeError> {
        request.validate()?;
        let (path, body) = match request.kind {
            RequestKind::Summarize => (
                "/v1/summarize",
                serde_json::to_value(SummarizeBody {
                    descriptions: request.descriptions.clone(),
                    seed: request.seed,
                    max_tokens: request.max_tokens,
                }),
            ),
            RequestKind::Refine => (
                "/v1/refine",
                serde_json::to_value(RefineBody {
                    prediction: request.prediction.clone().unwrap_or_default(),
                    descriptions: request.descriptions.clone(),
                    seed: request.seed,
                    max_tokens: request.max_tokens,
                }),
            ),
        };
        let body = body.expect("wire bodies serialize");

        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(path, &body) {
                Ok(Ok(summary)) => return Ok(summary),
                Ok(Err(reason)) => {
                    return Err(SummarizeError::Protocol {
                        request_id: request.request_id.clone(),
                        reason,
                    })
                }
                Err(e) if e.is_retryable() && attempt < self.policy.attempts => {
                    log::warn!(
                        "request {} attempt {attempt} failed: {e}; retrying",
                        request.request_id
                    );
                    std::thread::sleep(self.policy.delay(attempt));
                }
                Err(e) => {
                    return Err(SummarizeError::Backend {
                        request_id: request.request_id.clone(),
                        attempts: attempt,
                        source: e,
                    })
                }
            }
        }
    }
}
