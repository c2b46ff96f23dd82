//! Deterministic backends for tests and offline replay.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, Completion, LlmConfig, LlmError, Message, Usage};
use crate::tools::ToolSpec;

/// One expected request and its canned reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Substrings that must all occur somewhere in the request's messages.
    #[serde(rename = "match", default)]
    pub match_substrings: Vec<String>,
    pub respond: Message,
    #[serde(default)]
    pub usage: Usage,
}

/// Replays [`ScriptStep`]s in order. Temperature and reasoning effort are ignored.
#[derive(Debug)]
pub struct ScriptedBackend {
    steps: Vec<ScriptStep>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        ScriptedBackend { steps, cursor: Mutex::new(0) }
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let steps: Vec<ScriptStep> =
            serde_json::from_str(text).map_err(|e| LlmError::Protocol(format!("bad script: {e}")))?;
        Ok(ScriptedBackend::new(steps))
    }

    /// Number of steps consumed so far.
    pub fn consumed(&self) -> usize {
        *self.cursor.lock().expect("script cursor poisoned")
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn load_script(path: impl AsRef<Path>) -> Result<ScriptedBackend, LlmError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| LlmError::Protocol(format!("cannot read script {}: {e}", path.display())))?;
    ScriptedBackend::from_json(&text)
}

fn request_text(messages: &[Message]) -> String {
    let mut text = String::new();
    for m in messages {
        text.push_str(&m.content);
        text.push('\n');
        for c in &m.tool_calls {
            text.push_str(&c.name);
            text.push(' ');
            text.push_str(&c.arguments);
            text.push('\n');
        }
    }
    text
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, messages: &[Message], _tools: &[ToolSpec], _config: &LlmConfig) -> Result<Completion, LlmError> {
        let mut cursor = self.cursor.lock().expect("script cursor poisoned");
        let step_no = *cursor + 1;
        let step = self
            .steps
            .get(*cursor)
            .ok_or(LlmError::ScriptExhausted { steps: self.steps.len() })?;
        let haystack = request_text(messages);
        if let Some(missing) = step.match_substrings.iter().find(|s| !haystack.contains(s.as_str())) {
            return Err(LlmError::ScriptMismatch { step: step_no, missing: missing.clone() });
        }
        *cursor += 1;
        Ok(Completion { message: step.respond.clone(), usage: step.usage })
    }

    fn requires_sequential(&self) -> bool {
        true
    }
}

type Responder = dyn Fn(&[Message], &[ToolSpec]) -> Result<Message, LlmError> + Send + Sync;

/// Backend driven by a closure; handy for property tests.
pub struct FnBackend {
    responder: Box<Responder>,
    sequential: bool,
}

impl FnBackend {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&[Message], &[ToolSpec]) -> Result<Message, LlmError> + Send + Sync + 'static,
    {
        FnBackend { responder: Box::new(f), sequential: true }
    }

    /// Marks the closure as safe to call from concurrent candidates.
    pub fn concurrent(mut self) -> Self {
        self.sequential = false;
        self
    }
}

impl ChatBackend for FnBackend {
    fn complete(&self, messages: &[Message], tools: &[ToolSpec], _config: &LlmConfig) -> Result<Completion, LlmError> {
        let message = (self.responder)(messages, tools)?;
        Ok(Completion { message, usage: Usage::default() })
    }

    fn requires_sequential(&self) -> bool {
        self.sequential
    }
}
