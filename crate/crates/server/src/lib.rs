//! HTTP wire layer: the guardrail gateway service and the standalone
//! deterministic mock upstream.
//!
//! Both speak the chat-completions-compatible protocol from `ggate-core`'s
//! upstream module, so existing chat clients need no changes to point at
//! either.

pub mod gateway_service;
pub mod mock_service;

pub use gateway_service::{gateway_router, serve_gateway, GatewayState};
pub use mock_service::{mock_router, serve_mock};
