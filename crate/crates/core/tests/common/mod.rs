#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::sync::atomic::{AtomicUsize, Ordering};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::json;

use rapsg::pipeline::PipelineConfig;
use rapsg::summarization::{
    extractive_refine, extractive_summary, HealthResponse, RefineBody, SummarizeBody,
};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Fixture config writing into `out`.
pub fn fixture_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_file(fixture_dir().join("fixture.conf")).unwrap();
    cfg.output_dir = Some(out.to_path_buf());
    cfg
}

/// Shared state of the in-process echo service.
#[derive(Default)]
pub struct Echo {
    /// Fail this many requests before answering.
    pub fail_first: AtomicUsize,
    /// Status used for those failures; 0 means 503.
    pub fail_status: AtomicUsize,
    pub requests: AtomicUsize,
    pub bodies: std::sync::Mutex<Vec<Vec<u8>>>,
}

fn error(status: StatusCode, code: &str, message: String) -> Response {
    (status, axum::Json(json!({"error": {"code": code, "message": message}}))).into_response()
}

fn answer(summary: String) -> Response {
    let body = serde_json::to_vec(&json!({ "summary": summary })).unwrap();
    (StatusCode::OK, [("content-type", "application/json")], body).into_response()
}

fn record(state: &Echo, body: &Bytes) -> Option<Response> {
    state.requests.fetch_add(1, Ordering::SeqCst);
    state.bodies.lock().unwrap().push(body.to_vec());
    let pending = state.fail_first.load(Ordering::SeqCst);
    if pending > 0 {
        state.fail_first.store(pending - 1, Ordering::SeqCst);
        let status = match state.fail_status.load(Ordering::SeqCst) {
            0 => StatusCode::SERVICE_UNAVAILABLE,
            s => StatusCode::from_u16(s as u16).unwrap(),
        };
        return Some(error(status, "injected", "injected failure".into()));
    }
    None
}

async fn summarize(State(state): State<Arc<Echo>>, body: Bytes) -> Response {
    if let Some(r) = record(&state, &body) {
        return r;
    }
    match serde_json::from_slice::<SummarizeBody>(&body) {
        Ok(b) if !b.descriptions.is_empty() => answer(extractive_summary(&b.descriptions, b.max_tokens)),
        Ok(_) => error(StatusCode::BAD_REQUEST, "bad_request", "descriptions is empty".into()),
        Err(e) => error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
    }
}

async fn refine(State(state): State<Arc<Echo>>, body: Bytes) -> Response {
    if let Some(r) = record(&state, &body) {
        return r;
    }
    match serde_json::from_slice::<RefineBody>(&body) {
        Ok(b) => answer(extractive_refine(&b.prediction, &b.descriptions, b.max_tokens)),
        Err(e) => error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()),
    }
}

async fn health() -> Response {
    let body = serde_json::to_vec(&HealthResponse {
        status: "ok".into(),
        mode: "echo".into(),
    })
    .unwrap();
    (StatusCode::OK, [("content-type", "application/json")], body).into_response()
}

/// Start the echo service on an ephemeral port; returns its base URL.
pub fn spawn_echo(state: Arc<Echo>) -> String {
    let app = Router::new()
        .route("/v1/summarize", post(summarize))
        .route("/v1/refine", post(refine))
        .route("/v1/health", get(health))
        .with_state(state);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{addr}")
}
