//! HTTP API for the manual-review UI.
//!
//! `GET /api/pending?limit=N`, `GET /api/image/{id}`, `POST /api/decision`,
//! `GET /api/progress`. Everything else is served from the UI bundle if one
//! was given.

use std::future::Future;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mdb_core::review::{ReviewSession, Verdict};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub const DEFAULT_PENDING_LIMIT: usize = 50;
pub const DEFAULT_ANNOTATOR: &str = "anonymous";

pub struct AppState {
    pub session: ReviewSession,
    pub image_root: PathBuf,
    pub ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(session: ReviewSession, image_root: impl Into<PathBuf>, ui_dir: Option<PathBuf>) -> Self {
        AppState {
            session,
            image_root: image_root.into(),
            ui_dir,
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/pending", get(pending))
        .route("/api/image/{*id}", get(image))
        .route("/api/decision", post(decision))
        .route("/api/progress", get(progress))
        .fallback(static_file)
        .with_state(state)
}

/// Serves until `shutdown` resolves, then flushes the decision log.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.session.sync().map_err(std::io::Error::other)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
struct PendingQuery {
    limit: Option<usize>,
}

async fn pending(State(state): State<Arc<AppState>>, Query(q): Query<PendingQuery>) -> Response {
    let limit = q.limit.unwrap_or(DEFAULT_PENDING_LIMIT);
    let items: Vec<Value> = state
        .session
        .pending(limit)
        .into_iter()
        .map(|r| {
            json!({
                "id": r.id,
                "path": r.path,
                "source": r.source,
                "label": r.label,
                "meta": r.meta,
            })
        })
        .collect();
    Json(items).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: PathBuf) -> Response {
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "file not found"),
    }
}

async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(record) = state.session.record(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown id '{id}'"));
    };
    send_file(state.image_root.join(&record.path)).await
}

#[derive(Deserialize)]
struct DecisionBody {
    id: String,
    verdict: String,
    annotator: Option<String>,
}

async fn decision(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let body: DecisionBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let verdict: Verdict = match body.verdict.parse() {
        Ok(v) => v,
        Err(_) => return error(StatusCode::BAD_REQUEST, format!("verdict must be keep or drop, got '{}'", body.verdict)),
    };
    if state.session.record(&body.id).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown id '{}'", body.id));
    }
    let annotator = body
        .annotator
        .filter(|a| !a.trim().is_empty())
        .unwrap_or_else(|| DEFAULT_ANNOTATOR.to_string());
    let id = body.id;
    let result = tokio::task::spawn_blocking(move || state.session.decide(&id, verdict, &annotator)).await;
    match result {
        Ok(Ok(p)) => Json(json!({ "accepted": true, "decided_count": p.decided })).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn progress(State(state): State<Arc<AppState>>) -> Response {
    Json(state.session.progress()).into_response()
}

async fn static_file(State(state): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(dir) = &state.ui_dir else {
        return error(StatusCode::NOT_FOUND, "no such route");
    };
    let rel = Path::new(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(StatusCode::NOT_FOUND, "no such file");
    }
    let path = if rel.as_os_str().is_empty() { dir.join("index.html") } else { dir.join(rel) };
    send_file(path).await
}
