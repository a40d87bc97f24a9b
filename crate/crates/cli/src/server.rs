//! JSON HTTP API over one or more loaded backends.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nepqa_core::{BackendInfo, DialogueManager, ModelKind, Source, Verdict};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::CliError;

pub const DEFAULT_SESSION: &str = "http";

pub struct AppState {
    managers: BTreeMap<ModelKind, DialogueManager>,
    default_kind: ModelKind,
    failures: AtomicU64,
}

impl AppState {
    /// `default_kind` must be one of the managers' keys.
    pub fn new(managers: BTreeMap<ModelKind, DialogueManager>, default_kind: ModelKind) -> Result<AppState, CliError> {
        if !managers.contains_key(&default_kind) {
            return Err(CliError::Usage(format!("default backend {default_kind} is not loaded")));
        }
        Ok(AppState {
            managers,
            default_kind,
            failures: AtomicU64::new(0),
        })
    }

    pub fn default_kind(&self) -> ModelKind {
        self.default_kind
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub message: String,
    #[serde(default)]
    pub session_id: Option<String>,
    /// `retrieval` or `generative`; the server default when omitted.
    #[serde(default)]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub reply: String,
    pub source: Source,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub default_backend: ModelKind,
    pub models: Vec<BackendInfo>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    if req.message.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "message is empty");
    }
    let kind = match req.backend.as_deref() {
        None => state.default_kind,
        Some(name) => match name.parse::<ModelKind>() {
            Ok(k) => k,
            Err(_) => return error(StatusCode::BAD_REQUEST, format!("unknown backend {name:?}")),
        },
    };
    if !state.managers.contains_key(&kind) {
        return error(StatusCode::BAD_REQUEST, format!("backend {kind} is not loaded"));
    }
    let session = req.session_id.unwrap_or_else(|| DEFAULT_SESSION.to_owned());
    let worker = Arc::clone(&state);
    let joined = tokio::task::spawn_blocking(move || worker.managers[&kind].handle(&session, &req.message)).await;
    match joined {
        Ok(turn) => Json(ChatResponse {
            reply: turn.reply,
            source: turn.source,
            verdict: turn.verdict,
            confidence: turn.confidence,
        })
        .into_response(),
        Err(e) => {
            let id = state.failures.fetch_add(1, Ordering::Relaxed) + 1;
            eprintln!("request failure {id}: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, format!("internal error (ref {id})"))
        }
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_kind": state.default_kind }))
}

async fn info(State(state): State<Arc<AppState>>) -> Json<InfoResponse> {
    Json(InfoResponse {
        default_backend: state.default_kind,
        models: state.managers.values().map(|m| m.backend().info()).collect(),
    })
}

/// The API routes, plus static files under `/ui` when `ui_dir` is given.
pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/api/chat", post(chat))
        .route("/api/health", get(health))
        .route("/api/info", get(info))
        .with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.layer(CorsLayer::permissive())
}

/// Serves until ctrl-c.
pub fn serve(state: AppState, addr: SocketAddr, ui_dir: Option<PathBuf>) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::io(format!("bind {addr}"), e))?;
        let local = listener.local_addr().map_err(|e| CliError::io("local address", e))?;
        eprintln!("listening on http://{local}");
        axum::serve(listener, router(Arc::new(state), ui_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::io("server", e))
    })
}
