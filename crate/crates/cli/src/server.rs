//! HTTP service: `POST /respond` and `GET /health`.

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use emodial::pipeline::{Agent, PipelineError, RespondRequest, WIRE_VERSION};
use serde_json::json;
use std::sync::Arc;

pub fn router(agent: Arc<Agent>) -> Router {
    Router::new().route("/respond", post(respond)).route("/health", get(health)).with_state(agent)
}

fn error(status: StatusCode, body: serde_json::Value) -> Response {
    (status, Json(body)).into_response()
}

/// Parses a request body, naming the offending field on failure.
pub fn parse_request(body: &[u8]) -> Result<RespondRequest, (String, String)> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { path };
        (field, e.into_inner().to_string())
    })
}

async fn respond(State(agent): State<Arc<Agent>>, body: Bytes) -> Response {
    let request = match parse_request(&body) {
        Ok(r) => r,
        Err((field, message)) => {
            return error(StatusCode::BAD_REQUEST, json!({ "error": "invalid_request", "field": field, "message": message }))
        }
    };
    // Each request owns its decoding state; the agent itself is read-only.
    let result = tokio::task::spawn_blocking(move || agent.respond(&request)).await;
    match result {
        Ok(Ok(response)) => (StatusCode::OK, Json(response)).into_response(),
        Ok(Err(PipelineError::Request { field, message })) => {
            error(StatusCode::BAD_REQUEST, json!({ "error": "invalid_request", "field": field, "message": message }))
        }
        Ok(Err(PipelineError::Stage { stage, message })) => {
            error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "stage_failed", "stage": stage, "message": message }))
        }
        Ok(Err(e @ PipelineError::Config(_))) => {
            error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "config", "message": e.to_string() }))
        }
        Err(join) => error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "panic", "message": join.to_string() })),
    }
}

async fn health(State(agent): State<Arc<Agent>>) -> Response {
    (StatusCode::OK, Json(json!({ "status": "ok", "v": WIRE_VERSION, "versions": agent.versions() }))).into_response()
}

/// Serves until ctrl-c.
pub async fn serve(agent: Arc<Agent>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(agent))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
