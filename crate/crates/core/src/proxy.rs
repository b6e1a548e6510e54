//! OpenAI-compatible caching proxy.
//!
//! POST /v1/chat/completions answers from the cache when a verified
//! duplicate exists (X-Cache: HIT) and forwards to the upstream otherwise
//! (X-Cache: MISS). GET /metrics, GET /healthz, and POST /feedback round
//! out the surface.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::{CacheEngine, Judgment, LookupConfig, LookupKind};
use crate::config::ProxyConfig;
use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ProxyMetrics {
    pub lookups: AtomicU64,
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub inserts: AtomicU64,
    pub upstream_calls: AtomicU64,
    pub upstream_errors: AtomicU64,
}

/// Where a cache miss goes for a real answer.
pub enum Upstream {
    /// Deterministic stand-in: echoes the query with a stable hash tag,
    /// after an optional artificial delay.
    Mock { latency_ms: u64 },
    /// A real OpenAI-compatible endpoint.
    Url(String),
}

impl Upstream {
    pub fn from_config(cfg: &ProxyConfig) -> Self {
        match &cfg.upstream_url {
            Some(url) => Upstream::Url(url.clone()),
            None => Upstream::Mock { latency_ms: cfg.mock_latency_ms },
        }
    }

    async fn complete(&self, body: &serde_json::Value, query: &str) -> Result<String> {
        match self {
            Upstream::Mock { latency_ms } => {
                if *latency_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(*latency_ms)).await;
                }
                let tag = crate::embedding::fnv1a(query.as_bytes());
                Ok(format!("[mock:{tag:016x}] {query}"))
            }
            Upstream::Url(url) => {
                let client = reqwest::Client::new();
                let resp = client
                    .post(format!("{}/v1/chat/completions", url.trim_end_matches('/')))
                    .json(body)
                    .send()
                    .await
                    .map_err(|e| Error::UpstreamUnreachable(e.to_string()))?;
                if !resp.status().is_success() {
                    return Err(Error::UpstreamBadStatus(resp.status().as_u16()));
                }
                let value: serde_json::Value = resp
                    .json()
                    .await
                    .map_err(|e| Error::UpstreamUnreachable(e.to_string()))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| {
                        Error::UpstreamUnreachable("upstream response missing content".into())
                    })
            }
        }
    }
}

pub struct AppState {
    pub engine: Mutex<CacheEngine>,
    pub lookup_cfg: LookupConfig,
    pub upstream: Upstream,
    pub metrics: ProxyMetrics,
}

impl AppState {
    pub fn new(engine: CacheEngine, lookup_cfg: LookupConfig, upstream: Upstream) -> Arc<Self> {
        Arc::new(Self {
            engine: Mutex::new(engine),
            lookup_cfg,
            upstream,
            metrics: ProxyMetrics::default(),
        })
    }
}

pub fn build_router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/metrics", get(metrics))
        .route("/healthz", get(healthz))
        .route("/feedback", post(feedback))
        .with_state(state)
}

/// Bind and serve until the process exits.
pub async fn serve(state: Arc<AppState>, bind_addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind_addr).await?;
    log::info!("proxy listening on {}", listener.local_addr()?);
    axum::serve(listener, build_router(state))
        .await
        .map_err(Error::Io)
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatRequest {
    #[serde(default)]
    model: Option<String>,
    messages: Vec<ChatMessage>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub entry_id: u64,
    pub judgment: String,
}

fn bad_request(msg: &str) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": { "message": msg } }))).into_response()
}

fn completion_body(
    model: &str,
    content: &str,
    cached: bool,
    entry_id: Option<u64>,
) -> serde_json::Value {
    // usage is zero on cache hits: nothing was spent upstream
    let (prompt, completion) = if cached {
        (0, 0)
    } else {
        (1, 1)
    };
    let mut body = json!({
        "id": format!("semcache-{}", entry_id.unwrap_or(0)),
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": content },
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": prompt,
            "completion_tokens": completion,
            "total_tokens": prompt + completion
        }
    });
    if let Some(id) = entry_id {
        body["semcache_entry_id"] = json!(id);
    }
    body
}

async fn chat_completions(
    State(state): State<Arc<AppState>>,
    body: Option<Json<serde_json::Value>>,
) -> Response {
    let Some(Json(raw)) = body else {
        return bad_request("request body must be JSON");
    };
    let request: ChatRequest = match serde_json::from_value(raw.clone()) {
        Ok(r) => r,
        Err(e) => return bad_request(&format!("malformed chat request: {e}")),
    };
    let user_messages: Vec<&ChatMessage> =
        request.messages.iter().filter(|m| m.role == "user").collect();
    let Some((last, earlier)) = user_messages.split_last() else {
        return bad_request("at least one user message is required");
    };
    let query = last.content.clone();
    if query.trim().is_empty() {
        return bad_request("user message content is empty");
    }
    let history: Vec<String> = earlier.iter().map(|m| m.content.clone()).collect();
    let model = request.model.as_deref().unwrap_or("semcache").to_string();

    state.metrics.lookups.fetch_add(1, Ordering::Relaxed);
    let lookup = {
        let mut engine = state.engine.lock().unwrap();
        engine.lookup(&query, &history, &state.lookup_cfg)
    };
    match lookup {
        Ok(out) if out.kind == LookupKind::Hit => {
            state.metrics.hits.fetch_add(1, Ordering::Relaxed);
            let entry = out.entry.unwrap();
            let body = completion_body(&model, &entry.response_text, true, Some(entry.id));
            return ([("x-cache", "HIT")], Json(body)).into_response();
        }
        Ok(_) => {}
        Err(e) => {
            // a broken cache must not break the service; forward upstream
            log::warn!("cache lookup failed ({e}); falling through to upstream");
        }
    }
    state.metrics.misses.fetch_add(1, Ordering::Relaxed);

    state.metrics.upstream_calls.fetch_add(1, Ordering::Relaxed);
    let content = match state.upstream.complete(&raw, &query).await {
        Ok(c) => c,
        Err(e) => {
            state.metrics.upstream_errors.fetch_add(1, Ordering::Relaxed);
            return (
                StatusCode::BAD_GATEWAY,
                Json(json!({ "error": { "message": e.to_string() } })),
            )
                .into_response();
        }
    };

    let entry_id = {
        let mut engine = state.engine.lock().unwrap();
        match engine.insert(&query, &content, &history, None) {
            Ok(id) => {
                state.metrics.inserts.fetch_add(1, Ordering::Relaxed);
                Some(id)
            }
            Err(e) => {
                log::warn!("cache insert failed: {e}");
                None
            }
        }
    };
    let body = completion_body(&model, &content, false, entry_id);
    ([("x-cache", "MISS")], Json(body)).into_response()
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let m = &state.metrics;
    let engine = state.engine.lock().unwrap();
    Json(json!({
        "lookups": m.lookups.load(Ordering::Relaxed),
        "hits": m.hits.load(Ordering::Relaxed),
        "misses": m.misses.load(Ordering::Relaxed),
        "inserts": m.inserts.load(Ordering::Relaxed),
        "upstream_calls": m.upstream_calls.load(Ordering::Relaxed),
        "upstream_errors": m.upstream_errors.load(Ordering::Relaxed),
        "entries": engine.len(),
        "tau": engine.threshold().tau,
    }))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    body: Option<Json<serde_json::Value>>,
) -> Response {
    let Some(Json(raw)) = body else {
        return bad_request("request body must be JSON");
    };
    let req: FeedbackRequest = match serde_json::from_value(raw) {
        Ok(r) => r,
        Err(e) => return bad_request(&format!("malformed feedback request: {e}")),
    };
    let judgment = match req.judgment.as_str() {
        "accepted" => Judgment::Accepted,
        "rejected" => Judgment::Rejected,
        other => return bad_request(&format!("unknown judgment {other:?}")),
    };
    let result = {
        let mut engine = state.engine.lock().unwrap();
        engine.record_feedback(req.entry_id, judgment)
    };
    match result {
        Ok(()) => Json(json!({ "status": "recorded" })).into_response(),
        Err(Error::UnknownEntry(id)) => (
            StatusCode::NOT_FOUND,
            Json(json!({ "error": { "message": format!("unknown entry {id}") } })),
        )
            .into_response(),
        Err(e) => bad_request(&e.to_string()),
    }
}
