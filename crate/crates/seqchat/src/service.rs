//! HTTP chat service.
//!
//! `POST /api/reply` and `GET /api/health` speak JSON. Everything else is the
//! static web client, embedded in the binary unless a directory overrides it.

use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::{self, Write as _};
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

use crate::engine::{ChatEngine, EngineError, Reply};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
/// Request bodies above this size are rejected before parsing.
pub const MAX_BODY_BYTES: usize = 64 * 1024;

const ASSETS: [(&str, &str); 3] = [
    ("index.html", include_str!("../static/index.html")),
    ("app.js", include_str!("../static/app.js")),
    ("style.css", include_str!("../static/style.css")),
];

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub max_in_flight: usize,
    /// Serve the web client from here instead of the embedded copy.
    pub static_dir: Option<PathBuf>,
    /// Append one JSON line per reply to this file.
    pub transcript: Option<PathBuf>,
    /// Reported by the health endpoint.
    pub checkpoint_label: String,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            static_dir: None,
            transcript: None,
            checkpoint_label: String::new(),
        }
    }
}

#[derive(Deserialize)]
struct ReplyRequest {
    text: String,
    #[serde(default)]
    session_id: Option<String>,
}

struct Shared {
    engine: Option<Arc<ChatEngine>>,
    permits: Arc<Semaphore>,
    transcript: Option<Mutex<File>>,
    static_dir: Option<PathBuf>,
    label: String,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// `engine` is `None` while no model is loaded; replies then get 503.
    pub fn new(engine: Option<ChatEngine>, opts: ServiceOptions) -> io::Result<Self> {
        let transcript = match &opts.transcript {
            Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        Ok(Self(Arc::new(Shared {
            engine: engine.map(Arc::new),
            permits: Arc::new(Semaphore::new(opts.max_in_flight.max(1))),
            transcript,
            static_dir: opts.static_dir,
            label: opts.checkpoint_label,
        })))
    }

    fn log(&self, session: Option<&str>, text: &str, reply: &Reply) {
        let Some(file) = &self.0.transcript else { return };
        let timestamp_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        let line = json!({
            "timestamp_ms": timestamp_ms,
            "session_id": session,
            "text": text,
            "reply": reply.reply,
            "fallback_used": reply.fallback_used,
        });
        let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
            eprintln!("transcript write failed: {e}");
        }
    }
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn reply(State(state): State<AppState>, body: Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let req: ReplyRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")),
    };
    let Some(engine) = state.0.engine.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded");
    };
    let Ok(permit) = state.0.permits.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
    };
    let text = req.text.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        engine.reply(&text)
    })
    .await;
    match outcome {
        Ok(Ok(r)) => {
            state.log(req.session_id.as_deref(), &req.text, &r);
            Json(r).into_response()
        }
        Ok(Err(EngineError::BadRequest(m))) => error(StatusCode::BAD_REQUEST, m),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn health(State(state): State<AppState>) -> Response {
    match &state.0.engine {
        Some(engine) => Json(json!({
            "status": "ok",
            "vocab_size": engine.vocab().len(),
            "checkpoint": state.0.label,
            "beam_width": engine.beam_width(),
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "unavailable", "error": "no model loaded" })))
            .into_response(),
    }
}

fn content_type(name: &str) -> &'static str {
    match FsPath::new(name).extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn asset_named(state: &AppState, name: &str) -> Response {
    // Flat bundle: no nested paths, no dotfiles.
    if name.is_empty() || name.starts_with('.') || name.contains(['/', '\\']) {
        return error(StatusCode::NOT_FOUND, "not found");
    }
    let body = match &state.0.static_dir {
        Some(dir) => match tokio::fs::read(dir.join(name)).await {
            Ok(bytes) => bytes,
            Err(_) => return error(StatusCode::NOT_FOUND, "not found"),
        },
        None => match ASSETS.iter().find(|(n, _)| *n == name) {
            Some((_, text)) => text.as_bytes().to_vec(),
            None => return error(StatusCode::NOT_FOUND, "not found"),
        },
    };
    ([(header::CONTENT_TYPE, content_type(name))], body).into_response()
}

async fn index(State(state): State<AppState>) -> Response {
    asset_named(&state, "index.html").await
}

async fn asset(State(state): State<AppState>, Path(name): Path<String>) -> Response {
    asset_named(&state, &name).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/reply", post(reply))
        .route("/api/health", get(health))
        .route("/", get(index))
        .route("/{file}", get(asset))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains open requests.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C, or SIGTERM on Unix.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
