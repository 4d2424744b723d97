//! Policy-driven unlearning guardrails for chat-completion APIs.
//!
//! The crate wraps any chat-completion upstream in a declarative
//! [`policy::GuardrailPolicy`]: prompt prefixes, keyword filters, LLM-judge
//! filters, classifier thresholds, and two-stage routing with forced
//! incorrect answers. Alongside the gateway pipeline it ships an evaluation
//! harness ([`eval`]) computing forget/retain accuracy, truth ratio,
//! familiarity, and MCQ accuracy, plus a deterministic mock upstream
//! ([`mock`]) so everything runs offline and reproducibly.

pub mod eval;
pub mod gateway;
pub mod guardrails;
pub mod mock;
pub mod policy;
pub mod upstream;

pub use gateway::{handle_chat, ChatOutcome, GatewayError, PipelineClients};
pub use policy::{load_policy, validate_policy, GuardrailPolicy, PolicyError, Verdict};
pub use upstream::{ChatClient, ChatRequest, ChatResponse, ScoredSequence, UpstreamError};
