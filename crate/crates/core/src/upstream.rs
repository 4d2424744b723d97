//! Clients for the guarded LLM and for filter/judge models: chat completion
//! plus the sequence-scoring extension used by the truth-ratio metric.
//!
//! The wire protocol is chat-completions-compatible JSON over HTTP:
//! `POST /v1/chat/completions`, with a scoring extension at `POST /v1/score`
//! and a classifier endpoint at `POST /v1/classify`. Tokenization is owned
//! by the upstream: a scored continuation's length is the number of
//! logprobs it returns.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guardrails::{ClientError, JudgeClient, ScorerClient};

/// Environment variable holding the upstream API key, sent as a bearer token.
pub const UPSTREAM_KEY_ENV: &str = "GGATE_UPSTREAM_KEY";

const DEFAULT_MAX_TOKENS: u32 = 256;
const TRANSPORT_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// A chat-completion request. Temperature defaults to 0 so evaluation runs
/// are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(rename = "logprobs", default)]
    pub want_logprobs: bool,
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl ChatRequest {
    /// A single-user-message request with temperature 0.
    pub fn user(text: impl Into<String>) -> Self {
        ChatRequest {
            model: None,
            messages: vec![ChatMessage::user(text)],
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            want_logprobs: false,
        }
    }

    pub fn validate(&self) -> Result<(), UpstreamError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(UpstreamError::Rejected(
                "request has no user message".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(UpstreamError::Rejected(
                "temperature must be a non-negative number".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(UpstreamError::Rejected(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Content of the last user message, if any.
    pub fn last_user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// All user-message contents joined with newlines; the key the mock
    /// matches completions against.
    pub fn joined_user_content(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    /// Present only when requested and supported by the upstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl ChatResponse {
    pub fn stop(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            finish_reason: "stop".into(),
            token_logprobs: None,
        }
    }
}

/// Per-token log-probabilities of a continuation given a prompt: the raw
/// material of the truth-ratio metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub prompt: String,
    pub continuation: String,
    pub token_logprobs: Vec<f64>,
}

impl ScoredSequence {
    /// Validating constructor: the logprob list must be non-empty and every
    /// value must be a finite-or-neg-infinite number ≤ 0. A positive logprob
    /// is a contract violation surfaced as an error, never clamped.
    pub fn new(
        prompt: impl Into<String>,
        continuation: impl Into<String>,
        token_logprobs: Vec<f64>,
    ) -> Result<Self, UpstreamError> {
        if token_logprobs.is_empty() {
            return Err(UpstreamError::Protocol(
                "scored sequence has no token logprobs".into(),
            ));
        }
        for &lp in &token_logprobs {
            if lp.is_nan() || lp > 0.0 {
                return Err(UpstreamError::Protocol(format!(
                    "invalid token logprob {lp}: must be a number <= 0"
                )));
            }
        }
        Ok(ScoredSequence {
            prompt: prompt.into(),
            continuation: continuation.into(),
            token_logprobs,
        })
    }

    /// Continuation length in tokens of the scoring model.
    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum UpstreamError {
    /// Retryable connection-level failure.
    #[error("transport error: {0}")]
    Transport(String),
    /// Non-retryable rejection: bad request, auth failure, precondition.
    #[error("upstream rejected request: {0}")]
    Rejected(String),
    #[error("upstream timed out: {0}")]
    Timeout(String),
    /// The upstream has no scoring endpoint. Metrics that need one must be
    /// reported as unavailable, never fabricated.
    #[error("scoring unsupported: {0}")]
    ScoringUnsupported(String),
    /// The upstream answered with bytes that violate the wire contract.
    #[error("upstream protocol violation: {0}")]
    Protocol(String),
}

/// A chat-completion backend. `score_sequence` defaults to unsupported;
/// backends with a scoring endpoint override it.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, UpstreamError>;

    fn score_sequence(
        &self,
        _prompt: &str,
        _continuation: &str,
    ) -> Result<ScoredSequence, UpstreamError> {
        Err(UpstreamError::ScoringUnsupported(
            "this upstream does not expose a scoring endpoint".into(),
        ))
    }
}

pub(crate) fn validate_score_args(continuation: &str) -> Result<(), UpstreamError> {
    if continuation.is_empty() {
        Err(UpstreamError::Rejected(
            "continuation must be non-empty".into(),
        ))
    } else {
        Ok(())
    }
}

/// Wire-protocol bodies shared by the HTTP client, the gateway service, and
/// the mock server.
pub mod wire {
    use super::{ChatMessage, ChatResponse, Role};
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireChatResponse {
        pub id: String,
        pub object: String,
        pub created: u64,
        pub model: String,
        pub choices: Vec<WireChoice>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireChoice {
        pub index: u32,
        pub message: ChatMessage,
        pub finish_reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub logprobs: Option<WireLogprobs>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireLogprobs {
        pub content: Vec<WireTokenLogprob>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireTokenLogprob {
        pub token: String,
        pub logprob: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ScoreRequest {
        pub prompt: String,
        pub continuation: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ScoreResponse {
        pub token_logprobs: Vec<f64>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ClassifyRequest {
        pub text: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ClassifyResponse {
        pub score: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireErrorBody {
        pub error: String,
    }

    impl WireChatResponse {
        /// Wrap a domain response in the wire envelope.
        pub fn from_response(id: String, created: u64, model: String, resp: &ChatResponse) -> Self {
            WireChatResponse {
                id,
                object: "chat.completion".into(),
                created,
                model,
                choices: vec![WireChoice {
                    index: 0,
                    message: ChatMessage {
                        role: Role::Assistant,
                        content: resp.content.clone(),
                    },
                    finish_reason: resp.finish_reason.clone(),
                    logprobs: resp.token_logprobs.as_ref().map(|lps| WireLogprobs {
                        content: lps
                            .iter()
                            .map(|&lp| WireTokenLogprob {
                                token: String::new(),
                                logprob: lp,
                            })
                            .collect(),
                    }),
                }],
            }
        }

        /// Extract the first choice as a domain response.
        pub fn into_response(mut self) -> Result<ChatResponse, super::UpstreamError> {
            if self.choices.is_empty() {
                return Err(super::UpstreamError::Protocol(
                    "chat completion has no choices".into(),
                ));
            }
            let choice = self.choices.remove(0);
            Ok(ChatResponse {
                content: choice.message.content,
                finish_reason: choice.finish_reason,
                token_logprobs: choice
                    .logprobs
                    .map(|lp| lp.content.into_iter().map(|t| t.logprob).collect()),
            })
        }
    }
}

/// Chat client speaking the wire protocol over HTTP with bounded retries:
/// at most [`TRANSPORT_RETRIES`] retries with linear backoff, on transport
/// errors only, so filter verdict timing stays predictable.
pub struct HttpUpstream {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry_backoff: Duration,
}

impl HttpUpstream {
    /// Connect to `base_url` (for example `http://127.0.0.1:8081`). The API
    /// key is read from [`UPSTREAM_KEY_ENV`] when set.
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self::with_timeout(base_url, model, Duration::from_secs(120))
    }

    pub fn with_timeout(
        base_url: impl Into<String>,
        model: impl Into<String>,
        timeout: Duration,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpUpstream {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: std::env::var(UPSTREAM_KEY_ENV).ok(),
            agent: ureq::Agent::new_with_config(config),
            retry_backoff: Duration::from_millis(200),
        }
    }

    pub fn with_retry_backoff(mut self, backoff: Duration) -> Self {
        self.retry_backoff = backoff;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &impl Serialize,
    ) -> Result<T, UpstreamError> {
        let url = format!("{}{}", self.base_url, path);
        let mut last_err = None;
        for attempt in 0..=TRANSPORT_RETRIES {
            if attempt > 0 {
                std::thread::sleep(self.retry_backoff * attempt);
            }
            match self.send_once(&url, path, body) {
                Ok(value) => return Ok(value),
                Err(err @ UpstreamError::Transport(_)) => last_err = Some(err),
                Err(err) => return Err(err),
            }
        }
        Err(last_err.expect("retry loop ran at least once"))
    }

    fn send_once<T: serde::de::DeserializeOwned>(
        &self,
        url: &str,
        path: &str,
        body: &impl Serialize,
    ) -> Result<T, UpstreamError> {
        let mut request = self.agent.post(url);
        if let Some(key) = &self.api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|err| map_ureq_error(&err))?;
        let status = response.status().as_u16();
        match status {
            200..=299 => response
                .body_mut()
                .read_json::<T>()
                .map_err(|err| UpstreamError::Protocol(err.to_string())),
            404 | 405 if path == "/v1/score" => Err(UpstreamError::ScoringUnsupported(format!(
                "{url} answered {status}"
            ))),
            408 | 429 | 500..=599 => Err(UpstreamError::Transport(format!(
                "{url} answered {status}"
            ))),
            _ => Err(UpstreamError::Rejected(format!(
                "{url} answered {status}: {}",
                read_error_body(&mut response)
            ))),
        }
    }
}

fn read_error_body(response: &mut ureq::http::Response<ureq::Body>) -> String {
    response
        .body_mut()
        .read_json::<wire::WireErrorBody>()
        .map(|b| b.error)
        .unwrap_or_else(|_| "<no error body>".into())
}

fn map_ureq_error(err: &ureq::Error) -> UpstreamError {
    match err {
        ureq::Error::Timeout(reason) => UpstreamError::Timeout(reason.to_string()),
        other => UpstreamError::Transport(other.to_string()),
    }
}

impl ChatClient for HttpUpstream {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, UpstreamError> {
        request.validate()?;
        let mut outgoing = request.clone();
        if outgoing.model.is_none() {
            outgoing.model = Some(self.model.clone());
        }
        let wire: wire::WireChatResponse = self.post_json("/v1/chat/completions", &outgoing)?;
        wire.into_response()
    }

    fn score_sequence(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<ScoredSequence, UpstreamError> {
        validate_score_args(continuation)?;
        let body = wire::ScoreRequest {
            prompt: prompt.to_string(),
            continuation: continuation.to_string(),
        };
        let scored: wire::ScoreResponse = self.post_json("/v1/score", &body)?;
        ScoredSequence::new(prompt, continuation, scored.token_logprobs)
    }
}

/// A judge backed by any chat-completion client: the prompt is sent verbatim
/// as a single user message at temperature 0.
pub struct ChatJudge<C> {
    client: C,
}

impl<C: ChatClient> ChatJudge<C> {
    pub fn new(client: C) -> Self {
        ChatJudge { client }
    }
}

impl<C: ChatClient> JudgeClient for ChatJudge<C> {
    fn ask(&self, prompt: &str) -> Result<String, ClientError> {
        let request = ChatRequest::user(prompt);
        self.client
            .complete(&request)
            .map(|resp| resp.content)
            .map_err(|err| ClientError::JudgeUnavailable(err.to_string()))
    }
}

/// Scorer client for a classifier service exposing `POST /v1/classify`.
pub struct HttpScorer {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build();
        HttpScorer {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl ScorerClient for HttpScorer {
    fn score(&self, text: &str) -> Result<f64, ClientError> {
        let url = format!("{}/v1/classify", self.base_url);
        let body = wire::ClassifyRequest {
            text: text.to_string(),
        };
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|err| ClientError::ScorerUnavailable(err.to_string()))?;
        if !response.status().is_success() {
            return Err(ClientError::ScorerUnavailable(format!(
                "{url} answered {}",
                response.status()
            )));
        }
        let parsed: wire::ClassifyResponse = response
            .body_mut()
            .read_json()
            .map_err(|err| ClientError::ScorerUnavailable(err.to_string()))?;
        Ok(parsed.score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_without_user_message_rejected() {
        let request = ChatRequest {
            model: None,
            messages: vec![ChatMessage {
                role: Role::System,
                content: "only system".into(),
            }],
            temperature: 0.0,
            max_tokens: 16,
            want_logprobs: false,
        };
        assert!(matches!(
            request.validate(),
            Err(UpstreamError::Rejected(_))
        ));
    }

    #[test]
    fn user_constructor_defaults_temperature_zero() {
        let request = ChatRequest::user("q");
        assert_eq!(request.temperature, 0.0);
        request.validate().unwrap();
        assert_eq!(request.last_user_content(), Some("q"));
    }

    #[test]
    fn scored_sequence_rejects_positive_logprob() {
        let err = ScoredSequence::new("p", "c", vec![-0.1, 0.5]).unwrap_err();
        assert!(matches!(err, UpstreamError::Protocol(_)));
    }

    #[test]
    fn scored_sequence_rejects_empty_list() {
        assert!(ScoredSequence::new("p", "c", vec![]).is_err());
    }

    #[test]
    fn scored_sequence_accepts_zero_logprobs() {
        let s = ScoredSequence::new("p", "c", vec![0.0, 0.0]).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn empty_continuation_rejected_before_send() {
        assert!(matches!(
            validate_score_args(""),
            Err(UpstreamError::Rejected(_))
        ));
    }

    #[test]
    fn unreachable_upstream_is_transport_error() {
        // Bind a loopback port and drop it; connecting is then refused.
        let port = {
            let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            listener.local_addr().unwrap().port()
        };
        let client = HttpUpstream::with_timeout(
            format!("http://127.0.0.1:{port}"),
            "test-model",
            Duration::from_millis(300),
        )
        .with_retry_backoff(Duration::from_millis(1));
        let err = client.complete(&ChatRequest::user("q")).unwrap_err();
        assert!(
            matches!(err, UpstreamError::Transport(_) | UpstreamError::Timeout(_)),
            "unexpected error: {err:?}"
        );
    }

    #[test]
    fn wire_round_trip_preserves_content_and_logprobs() {
        let resp = ChatResponse {
            content: "hello".into(),
            finish_reason: "stop".into(),
            token_logprobs: Some(vec![-0.5, -0.25]),
        };
        let wire = wire::WireChatResponse::from_response("id".into(), 0, "m".into(), &resp);
        let back = wire.into_response().unwrap();
        assert_eq!(back, resp);
    }

    #[test]
    fn wire_response_without_choices_is_protocol_error() {
        let wire = wire::WireChatResponse {
            id: "x".into(),
            object: "chat.completion".into(),
            created: 0,
            model: "m".into(),
            choices: vec![],
        };
        assert!(matches!(
            wire.into_response(),
            Err(UpstreamError::Protocol(_))
        ));
    }
}
