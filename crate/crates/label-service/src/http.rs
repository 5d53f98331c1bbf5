//! HTTP surface of the label queue.
//!
//! Every route except `/health` expects `Authorization: Bearer <token>`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cardinal_core::data_io::FieldMap;
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::queue::{LabelService, LabelSubmission, RejectReason, ServiceError, SubmitOutcome};

type Shared = Arc<LabelService>;

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tasks/next", get(next_task))
        .route("/labels", post(submit))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

/// Bind and serve until the future is dropped.
pub async fn serve(service: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("label service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[allow(clippy::result_large_err)]
fn labeler(service: &LabelService, headers: &HeaderMap) -> Result<String, Response> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| error(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
    service
        .authenticate(token.trim())
        .map(str::to_string)
        .ok_or_else(|| error(StatusCode::UNAUTHORIZED, "unknown token"))
}

fn internal(e: ServiceError) -> Response {
    log::error!("{e}");
    error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn health() -> impl IntoResponse {
    Json(json!({ "status": "ok" }))
}

async fn next_task(State(service): State<Shared>, headers: HeaderMap) -> Response {
    let who = match labeler(&service, &headers) {
        Ok(w) => w,
        Err(r) => return r,
    };
    match service.next_task(&who) {
        Ok(Some(task)) => Json(task).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => internal(e),
    }
}

async fn submit(State(service): State<Shared>, headers: HeaderMap, body: Result<Json<LabelSubmission>, JsonRejection>) -> Response {
    let who = match labeler(&service, &headers) {
        Ok(w) => w,
        Err(r) => return r,
    };
    let Json(sub) = match body {
        Ok(b) => b,
        Err(e) => {
            let outcome = SubmitOutcome::Rejected {
                reason: RejectReason::Validation,
                field: None,
                message: e.body_text(),
            };
            return (StatusCode::UNPROCESSABLE_ENTITY, Json(outcome)).into_response();
        }
    };
    if sub.labeler_id != who {
        return error(StatusCode::FORBIDDEN, "labeler_id does not match token");
    }
    match service.submit_label(&sub) {
        Ok(outcome) => {
            let status = match &outcome {
                SubmitOutcome::Accepted { .. } => StatusCode::OK,
                SubmitOutcome::Rejected { reason, .. } => match reason {
                    RejectReason::Validation | RejectReason::Budget => StatusCode::UNPROCESSABLE_ENTITY,
                    RejectReason::StaleLease | RejectReason::Duplicate => StatusCode::CONFLICT,
                    RejectReason::UnknownTask => StatusCode::NOT_FOUND,
                },
            };
            (status, Json(outcome)).into_response()
        }
        Err(e) => internal(e),
    }
}

async fn progress(State(service): State<Shared>, headers: HeaderMap) -> Response {
    if let Err(r) = labeler(&service, &headers) {
        return r;
    }
    Json(service.progress()).into_response()
}

/// `?map=wtp=amount,labeler_id=rater` renames output fields.
async fn export(State(service): State<Shared>, headers: HeaderMap, Query(q): Query<HashMap<String, String>>) -> Response {
    if let Err(r) = labeler(&service, &headers) {
        return r;
    }
    let fields = match q.get("map").map(|m| FieldMap::parse_overrides(m)).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    ([(header::CONTENT_TYPE, "application/x-ndjson")], service.export(&fields)).into_response()
}
