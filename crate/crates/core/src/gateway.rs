//! Request pipeline: input stage chain, upstream call, output stage chain,
//! and audit records.
//!
//! A blocked input stage answers with the refusal template without ever
//! contacting the upstream; that is the privacy property of input filtering.
//! Refusals are returned as ordinary completions, not HTTP errors, so
//! clients observe a well-formed response either way.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guardrails::{execute_stages, FilterClients, JudgeClient, ScorerClient};
use crate::policy::{DecisionTrace, FinalSource, GuardrailPolicy, Verdict};
use crate::upstream::{ChatClient, ChatRequest, ChatResponse, UpstreamError};

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Unique per-process request id: start-time millis plus a counter.
/// Uniqueness is required; global ordering is not.
pub fn next_request_id() -> String {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let seq = REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed);
    format!("{millis:x}-{seq}")
}

/// The client handles one request needs.
#[derive(Clone, Copy)]
pub struct PipelineClients<'a> {
    pub upstream: &'a dyn ChatClient,
    pub judge: Option<&'a dyn JudgeClient>,
    pub scorer: Option<&'a dyn ScorerClient>,
}

impl<'a> PipelineClients<'a> {
    pub fn new(upstream: &'a dyn ChatClient) -> Self {
        PipelineClients {
            upstream,
            judge: None,
            scorer: None,
        }
    }

    pub fn with_judge(mut self, judge: &'a dyn JudgeClient) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn with_scorer(mut self, scorer: &'a dyn ScorerClient) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn filters(&self) -> FilterClients<'a> {
        FilterClients {
            judge: self.judge,
            scorer: self.scorer,
        }
    }
}

/// A completed request: the response to return and its audit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatOutcome {
    pub response: ChatResponse,
    pub trace: DecisionTrace,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// The upstream call failed. The trace up to the failure is preserved
    /// so the request can still be audited.
    #[error("upstream failure: {source}")]
    Upstream {
        source: UpstreamError,
        trace: DecisionTrace,
    },
}

/// Drive one chat request through the full guardrail pipeline.
///
/// Input stages run over the latest user message; a Block answers the
/// refusal template without calling the upstream. Otherwise the transformed
/// text replaces the latest user message, the upstream is called, and output
/// stages run over its answer.
pub fn handle_chat(
    request: &ChatRequest,
    policy: &GuardrailPolicy,
    clients: &PipelineClients,
) -> Result<ChatOutcome, GatewayError> {
    request
        .validate()
        .map_err(|err| GatewayError::InvalidRequest(err.to_string()))?;

    let mut trace = DecisionTrace::new(next_request_id());
    let user_text = request
        .last_user_content()
        .expect("validated request has a user message")
        .to_string();

    let input = execute_stages(
        &user_text,
        &policy.input_stages,
        policy,
        &clients.filters(),
    );
    let input_blocked = input.blocked();
    trace.record_entries(input.entries);
    if input_blocked {
        trace.set_final_source(FinalSource::RefusalTemplate);
        return Ok(ChatOutcome {
            response: ChatResponse::stop(policy.refusal_template.clone()),
            trace,
        });
    }

    let mut outgoing = request.clone();
    if let Some(message) = outgoing
        .messages
        .iter_mut()
        .rev()
        .find(|m| m.role == crate::upstream::Role::User)
    {
        message.content = input.text;
    }

    let upstream_response = match clients.upstream.complete(&outgoing) {
        Ok(response) => response,
        Err(source) => return Err(GatewayError::Upstream { source, trace }),
    };

    let output = execute_stages(
        &upstream_response.content,
        &policy.output_stages,
        policy,
        &clients.filters(),
    );
    let output_blocked = output.blocked();
    let output_rewritten = output.rewritten;
    trace.record_entries(output.entries);

    let response = if output_blocked {
        trace.set_final_source(FinalSource::RefusalTemplate);
        ChatResponse::stop(policy.refusal_template.clone())
    } else if output_rewritten {
        trace.set_final_source(FinalSource::Rewrite);
        ChatResponse {
            content: output.text,
            finish_reason: upstream_response.finish_reason,
            token_logprobs: None,
        }
    } else {
        trace.set_final_source(FinalSource::Upstream);
        upstream_response
    };

    Ok(ChatOutcome { response, trace })
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: String,
    pub request_id: String,
    pub policy_id: String,
    pub stages: Vec<AuditStage>,
    pub blocked: bool,
    pub final_source: FinalSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditStage {
    pub stage_id: String,
    #[serde(flatten)]
    pub verdict: Verdict,
}

impl AuditRecord {
    pub fn from_trace(trace: &DecisionTrace, policy_id: &str) -> Self {
        AuditRecord {
            timestamp: chrono::Utc::now().to_rfc3339(),
            request_id: trace.request_id().to_string(),
            policy_id: policy_id.to_string(),
            stages: trace
                .entries()
                .iter()
                .map(|entry| AuditStage {
                    stage_id: entry.stage_id.clone(),
                    verdict: entry.verdict.clone(),
                })
                .collect(),
            blocked: trace.blocked(),
            final_source: trace.final_source(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit sink unavailable: {0}")]
    SinkUnavailable(String),
}

/// Append-only destination for audit records. The sink is the only
/// serialized resource in the gateway: single-writer append.
pub trait AuditSink: Send + Sync {
    fn append(&self, record: &AuditRecord) -> Result<(), AuditError>;
}

/// Build the audit record for a trace and append it to the sink.
pub fn write_audit(
    trace: &DecisionTrace,
    policy_id: &str,
    sink: &dyn AuditSink,
) -> Result<AuditRecord, AuditError> {
    let record = AuditRecord::from_trace(trace, policy_id);
    sink.append(&record)?;
    Ok(record)
}

/// Line-delimited JSON audit log on disk, opened in append mode.
pub struct FileAuditSink {
    file: Mutex<std::fs::File>,
}

impl FileAuditSink {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FileAuditSink {
            file: Mutex::new(file),
        })
    }
}

impl AuditSink for FileAuditSink {
    fn append(&self, record: &AuditRecord) -> Result<(), AuditError> {
        let line = serde_json::to_string(record)
            .map_err(|err| AuditError::SinkUnavailable(err.to_string()))?;
        let mut file = self
            .file
            .lock()
            .map_err(|_| AuditError::SinkUnavailable("audit lock poisoned".into()))?;
        writeln!(file, "{line}").map_err(|err| AuditError::SinkUnavailable(err.to_string()))
    }
}

/// In-memory sink for tests.
#[derive(Default)]
pub struct MemoryAuditSink {
    records: Mutex<Vec<AuditRecord>>,
}

impl MemoryAuditSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().unwrap().clone()
    }
}

impl AuditSink for MemoryAuditSink {
    fn append(&self, record: &AuditRecord) -> Result<(), AuditError> {
        self.records.lock().unwrap().push(record.clone());
        Ok(())
    }
}
