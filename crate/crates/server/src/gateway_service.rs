//! The deployable gateway: accepts client chat requests, runs the guardrail
//! pipeline against the configured upstream, and appends audit records.
//!
//! Refusals are ordinary 200 responses carrying the policy's refusal
//! template; only upstream failures surface as 502 and malformed requests
//! as 400. Audit failures never fail the request; they are logged.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use ggate_core::gateway::{handle_chat, write_audit, AuditSink, GatewayError, PipelineClients};
use ggate_core::guardrails::{JudgeClient, ScorerClient};
use ggate_core::policy::GuardrailPolicy;
use ggate_core::upstream::wire::{WireChatResponse, WireErrorBody};
use ggate_core::upstream::{ChatClient, ChatRequest};

/// Shared, read-only service state. The audit sink is the only serialized
/// resource.
pub struct GatewayState {
    pub policy: Arc<GuardrailPolicy>,
    pub upstream: Arc<dyn ChatClient>,
    pub judge: Option<Arc<dyn JudgeClient>>,
    pub scorer: Option<Arc<dyn ScorerClient>>,
    pub audit: Arc<dyn AuditSink>,
}

impl GatewayState {
    fn clients(&self) -> PipelineClients<'_> {
        let mut clients = PipelineClients::new(self.upstream.as_ref());
        if let Some(judge) = &self.judge {
            clients = clients.with_judge(judge.as_ref());
        }
        if let Some(scorer) = &self.scorer {
            clients = clients.with_scorer(scorer.as_ref());
        }
        clients
    }
}

pub fn gateway_router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

/// Serve the gateway until the listener closes.
pub async fn serve_gateway(
    listener: tokio::net::TcpListener,
    state: Arc<GatewayState>,
) -> std::io::Result<()> {
    axum::serve(listener, gateway_router(state)).await
}

fn epoch_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(WireErrorBody { error: message })).into_response()
}

async fn chat_completions(
    State(state): State<Arc<GatewayState>>,
    Json(request): Json<ChatRequest>,
) -> Response {
    let model = request.model.clone().unwrap_or_else(|| "ggate".into());
    let result = tokio::task::spawn_blocking(move || {
        let outcome = handle_chat(&request, &state.policy, &state.clients());
        let trace = match &outcome {
            Ok(completed) => Some(&completed.trace),
            Err(GatewayError::Upstream { trace, .. }) => Some(trace),
            Err(GatewayError::InvalidRequest(_)) => None,
        };
        if let Some(trace) = trace {
            if let Err(err) = write_audit(trace, &state.policy.policy_id, state.audit.as_ref()) {
                tracing::warn!(request_id = trace.request_id(), "audit append failed: {err}");
            }
        }
        outcome
    })
    .await;

    match result {
        Ok(Ok(outcome)) => {
            let wire = WireChatResponse::from_response(
                outcome.trace.request_id().to_string(),
                epoch_seconds(),
                model,
                &outcome.response,
            );
            Json(wire).into_response()
        }
        Ok(Err(GatewayError::InvalidRequest(message))) => {
            error_response(StatusCode::BAD_REQUEST, message)
        }
        Ok(Err(err @ GatewayError::Upstream { .. })) => {
            error_response(StatusCode::BAD_GATEWAY, err.to_string())
        }
        Err(join_err) => error_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("pipeline task failed: {join_err}"),
        ),
    }
}
