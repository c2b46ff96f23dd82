//! Chat backends and the generic tool-interaction loop.

mod http;
mod scripted;
mod tool_loop;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::tools::ToolSpec;

pub use http::HttpBackend;
pub use scripted::{load_script, FnBackend, ScriptStep, ScriptedBackend};
pub use tool_loop::{run_tool_loop, Dispatched, LoopOutcome, ToolDispatcher, Transcript, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// A tool invocation requested by the model. `arguments` is the raw JSON
/// text from the wire; it is parsed (and may fail to parse) at dispatch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRequest {
    pub id: String,
    pub name: String,
    #[serde(deserialize_with = "arguments_text")]
    pub arguments: String,
}

impl ToolCallRequest {
    pub fn new(id: impl Into<String>, name: impl Into<String>, arguments: serde_json::Value) -> Self {
        ToolCallRequest { id: id.into(), name: name.into(), arguments: arguments.to_string() }
    }
}

/// Accepts either a JSON string (wire form) or an inline object (fixtures).
fn arguments_text<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    let v = serde_json::Value::deserialize(d)?;
    Ok(match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    })
}

fn default_role() -> Role {
    Role::Assistant
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into(), tool_calls: vec![], tool_call_id: None }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into(), tool_calls: vec![], tool_call_id: None }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into(), tool_calls: vec![], tool_call_id: None }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Message {
            role: Role::Tool,
            content: content.into(),
            tool_calls: vec![],
            tool_call_id: Some(call_id.into()),
        }
    }

    pub fn with_tool_calls(mut self, calls: Vec<ToolCallRequest>) -> Self {
        self.tool_calls = calls;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.role == Role::Tool && self.tool_call_id.is_none() {
            return Err("tool message without tool_call_id".into());
        }
        if self.role != Role::Assistant && !self.tool_calls.is_empty() {
            return Err("tool_calls are only allowed on assistant messages".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub model_id: String,
    pub temperature: f64,
    pub reasoning_effort: ReasoningEffort,
    pub endpoint: String,
    pub max_loop_steps: usize,
    pub request_timeout_s: u64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Client-side rate limit; `None` disables it.
    pub requests_per_second: Option<f64>,
    pub retry_backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            model_id: "gpt-oss-120b".into(),
            temperature: 1.0,
            reasoning_effort: ReasoningEffort::High,
            endpoint: "http://localhost:8000".into(),
            max_loop_steps: 30,
            request_timeout_s: 600,
            api_key_env: "FLEXSQL_API_KEY".into(),
            requests_per_second: None,
            retry_backoff_ms: 500,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_loop_steps < 1 {
            return Err("max_loop_steps must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("script mismatch at step {step}: request does not contain {missing:?}")]
    ScriptMismatch { step: usize, missing: String },
    #[error("script exhausted after {steps} steps")]
    ScriptExhausted { steps: usize },
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
}

/// One assistant turn plus the usage it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub message: Message,
    pub usage: Usage,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[Message], tools: &[ToolSpec], config: &LlmConfig) -> Result<Completion, LlmError>;

    /// Replay backends answer in a fixed order, so callers must not
    /// interleave requests from concurrent workers.
    fn requires_sequential(&self) -> bool {
        false
    }
}

/// Sends one chat request. The conversation must start with a system turn.
pub fn chat(
    backend: &dyn ChatBackend,
    messages: &[Message],
    tools: &[ToolSpec],
    config: &LlmConfig,
) -> Result<Completion, LlmError> {
    match messages.first() {
        None => return Err(LlmError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::System => {
            return Err(LlmError::InvalidRequest("first message must be the system prompt".into()))
        }
        _ => {}
    }
    let mut completion = backend.complete(messages, tools, config)?;
    completion.message.role = Role::Assistant;
    completion.message.tool_call_id = None;
    Ok(completion)
}
