use super::{RefreshResponse, ScoredCompletion, Service};
use crate::error::LadError;
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompleteRequest {
    user_id: String,
    prefix: String,
}

#[derive(Debug, Serialize)]
struct CompleteBody {
    completions: Vec<ScoredCompletion>,
    rejected_count: usize,
    latency_ms: f64,
    generation: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRequest {
    user_id: String,
    query: String,
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl From<LadError> for ApiError {
    fn from(e: LadError) -> Self {
        let (status, code) = match &e {
            LadError::InvalidInput(_) => (StatusCode::BAD_REQUEST, "invalid_input"),
            LadError::TooLong { .. } => (StatusCode::BAD_REQUEST, "too_long"),
            LadError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: r.body_text(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "code": self.code });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> std::result::Result<T, ApiError>
where
    F: FnOnce() -> crate::Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        }),
    }
}

async fn complete(
    State(svc): State<Arc<Service>>,
    req: std::result::Result<Json<CompleteRequest>, JsonRejection>,
) -> ApiResult<CompleteBody> {
    let Json(req) = req?;
    let start = Instant::now();
    let r = blocking(move || svc.complete(&req.user_id, &req.prefix)).await?;
    Ok(Json(CompleteBody {
        completions: r.completions,
        rejected_count: r.rejected_count,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        generation: r.generation,
    }))
}

async fn event(
    State(svc): State<Arc<Service>>,
    req: std::result::Result<Json<EventRequest>, JsonRejection>,
) -> ApiResult<serde_json::Value> {
    let Json(req) = req?;
    svc.record_event(&req.user_id, &req.query)?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn refresh(State(svc): State<Arc<Service>>) -> ApiResult<RefreshResponse> {
    Ok(Json(blocking(move || svc.refresh_from_log()).await?))
}

async fn health(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    let status = if svc.model().is_ok() { "ok" } else { "no_model" };
    Json(serde_json::json!({ "status": status, "checkpoint": svc.checkpoint() }))
}

/// Routes of the completion API bound to `service`.
pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/complete", post(complete))
        .route("/v1/event", post(event))
        .route("/v1/memory/refresh", post(refresh))
        .route("/v1/health", get(health))
        .with_state(service)
}

/// Serve on an already bound `listener` until the task is cancelled.
pub async fn serve(service: Arc<Service>, listener: tokio::net::TcpListener) -> crate::Result<()> {
    let addr = listener
        .local_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "<listener>".into());
    log::info!("listening on {addr}");
    axum::serve(listener, router(service))
        .await
        .map_err(|e| LadError::io(addr, e))
}
