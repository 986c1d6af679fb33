use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cfparse_core::feedback::Judgment;
use serde::{Deserialize, Serialize};

use crate::store::{FormStore, StoreError};

pub type SharedStore = Arc<Mutex<FormStore>>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
}

#[derive(Debug, Deserialize)]
pub struct NextParams {
    pub annotator: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitBody {
    pub annotator: String,
    pub judgments: Vec<Judgment>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub forms: usize,
    pub served: usize,
    pub submitted: usize,
}

struct ApiError(StoreError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            StoreError::Exhausted => (StatusCode::GONE, "exhausted"),
            StoreError::UnknownForm(_) => (StatusCode::NOT_FOUND, "unknown_form"),
            StoreError::AlreadySubmitted(_) => (StatusCode::CONFLICT, "already_submitted"),
            StoreError::NotServed(_) => (StatusCode::CONFLICT, "not_served"),
            StoreError::Feedback(_) => (StatusCode::UNPROCESSABLE_ENTITY, "incomplete_judgments"),
            StoreError::Replay { .. } | StoreError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        let body = ErrorBody {
            error: self.0.to_string(),
            code: code.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

fn lock(store: &SharedStore) -> std::sync::MutexGuard<'_, FormStore> {
    store.lock().unwrap_or_else(|e| e.into_inner())
}

async fn health(State(store): State<SharedStore>) -> Json<Health> {
    let p = lock(&store).progress();
    Json(Health {
        status: "ok".into(),
        forms: p.forms,
        served: p.served,
        submitted: p.submitted,
    })
}

async fn next_form(State(store): State<SharedStore>, Query(q): Query<NextParams>) -> Response {
    match lock(&store).serve_next(&q.annotator) {
        Ok(form) => Json(form).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn submit(State(store): State<SharedStore>, Path(id): Path<usize>, Json(body): Json<SubmitBody>) -> Response {
    match lock(&store).submit(id, &body.annotator, body.judgments) {
        Ok(receipt) => Json(receipt).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn export(State(store): State<SharedStore>) -> Response {
    Json(lock(&store).export()).into_response()
}

async fn export_log(State(store): State<SharedStore>) -> Response {
    let log = lock(&store).export().log;
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], log).into_response()
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/forms/next", get(next_form))
        .route("/forms/:id/submit", post(submit))
        .route("/export", get(export))
        .route("/export/log", get(export_log))
        .with_state(store)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, store: FormStore) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("feedback service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(Mutex::new(store)))).await
}
