//! HTTP query service over a knowledge base directory.
//!
//! Routes: `POST /query`, `GET /rules/{id}`, `POST /rules/{id}/review` and
//! `GET /health`. Bodies are JSON in both directions.

use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, RwLock};
use std::thread;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rcakb_core::rules::{RuleError, Verdict};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::error::CliError;
use crate::kb::{KnowledgeBase, QueryHit, QueryRequest};

type Shared = Arc<RwLock<KnowledgeBase>>;

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub verdict: Verdict,
    pub reviewer: String,
    #[serde(default)]
    pub note: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = match &e {
            CliError::Usage(_) => StatusCode::BAD_REQUEST,
            CliError::Rules(RuleError::UnknownRule(_)) => StatusCode::NOT_FOUND,
            CliError::Rules(RuleError::AlreadyReviewed { .. }) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

async fn health(State(kb): State<Shared>) -> Json<serde_json::Value> {
    let kb = kb.read().expect("kb lock poisoned");
    Json(json!({ "status": "ok", "entries": kb.index.len(), "rules": kb.store.len() }))
}

async fn query(
    State(kb): State<Shared>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryResponse>, ApiError> {
    let Json(request) = body?;
    let results = kb.read().expect("kb lock poisoned").query(&request)?;
    Ok(Json(QueryResponse { results }))
}

async fn get_rule(State(kb): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let kb = kb.read().expect("kb lock poisoned");
    match kb.store.get(&id) {
        Some(rule) => Ok(Json(rule).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("unknown rule `{id}`"))),
    }
}

async fn review(
    State(kb): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<ReviewRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(r) = body?;
    let rule = kb
        .write()
        .expect("kb lock poisoned")
        .review(&id, r.verdict, &r.reviewer, &r.note)?;
    Ok(Json(rule).into_response())
}

pub fn router(kb: KnowledgeBase) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/query", post(query))
        .route("/rules/{id}", get(get_rule))
        .route("/rules/{id}/review", post(review))
        .with_state(Arc::new(RwLock::new(kb)))
}

/// A service running on a background thread.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    /// Blocks until the server stops.
    pub fn wait(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("service thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait()
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Binds `addr` and serves `kb` until the handle is stopped or dropped.
pub fn spawn(kb: KnowledgeBase, addr: &str) -> Result<ServiceHandle, CliError> {
    let bind_err = |e| CliError::BindFailure {
        addr: addr.to_string(),
        source: e,
    };
    let listener = TcpListener::bind(addr).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let local = listener.local_addr().map_err(bind_err)?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(kb);
    let thread = thread::spawn(move || -> std::io::Result<()> {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    tracing::info!(%local, "service listening");
    Ok(ServiceHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
