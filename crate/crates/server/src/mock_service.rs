//! Standalone mock upstream server over a [`MockTable`].
//!
//! Responses are a pure function of (table, request): ids and timestamps are
//! fixed, so the wire bytes for a given request never change and match the
//! in-process mock's content exactly.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};

use ggate_core::mock::MockTable;
use ggate_core::upstream::wire::{
    ClassifyRequest, ClassifyResponse, ScoreRequest, ScoreResponse, WireChatResponse,
    WireErrorBody,
};
use ggate_core::upstream::ChatRequest;

pub fn mock_router(table: Arc<MockTable>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/v1/score", post(score))
        .route("/v1/classify", post(classify))
        .with_state(table)
}

/// Serve the mock until the listener closes.
pub async fn serve_mock(
    listener: tokio::net::TcpListener,
    table: Arc<MockTable>,
) -> std::io::Result<()> {
    axum::serve(listener, mock_router(table)).await
}

fn bad_request(message: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(WireErrorBody { error: message })).into_response()
}

async fn chat_completions(
    State(table): State<Arc<MockTable>>,
    Json(request): Json<ChatRequest>,
) -> Response {
    if let Err(err) = request.validate() {
        return bad_request(err.to_string());
    }
    let model = request.model.clone().unwrap_or_else(|| "mock".into());
    let response = table.complete(&request);
    let wire = WireChatResponse::from_response("mock-0".into(), 0, model, &response);
    Json(wire).into_response()
}

async fn score(
    State(table): State<Arc<MockTable>>,
    Json(request): Json<ScoreRequest>,
) -> Response {
    if request.continuation.is_empty() {
        return bad_request("continuation must be non-empty".into());
    }
    match table.score(&request.prompt, &request.continuation) {
        Ok(scored) => Json(ScoreResponse {
            token_logprobs: scored.token_logprobs,
        })
        .into_response(),
        Err(err) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(WireErrorBody {
                error: err.to_string(),
            }),
        )
            .into_response(),
    }
}

async fn classify(
    State(table): State<Arc<MockTable>>,
    Json(request): Json<ClassifyRequest>,
) -> Response {
    Json(ClassifyResponse {
        score: table.classify(&request.text),
    })
    .into_response()
}
