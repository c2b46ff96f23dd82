use serde::{Deserialize, Serialize};

use super::{chat, ChatBackend, LlmConfig, LlmError, Message, Role, ToolCallRequest};
use crate::tools::{ToolCallRecord, ToolResult, ToolSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.total_tokens += other.total_tokens;
    }
}

/// Append-only log of one conversation and the tool calls made in it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    messages: Vec<Message>,
    tool_records: Vec<ToolCallRecord>,
    usage: Usage,
    chat_calls: usize,
}

impl Transcript {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        let mut t = Transcript::default();
        t.push(Message::system(system));
        t.push(Message::user(user));
        t
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn tool_records(&self) -> &[ToolCallRecord] {
        &self.tool_records
    }

    pub fn usage(&self) -> Usage {
        self.usage
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls
    }

    pub fn last_assistant(&self) -> Option<&Message> {
        self.messages.iter().rev().find(|m| m.role == Role::Assistant)
    }

    /// Every assistant tool call must be answered by a tool message before
    /// the next assistant turn.
    pub fn check_alternation(&self) -> Result<(), String> {
        let mut pending: Vec<&str> = Vec::new();
        for (i, m) in self.messages.iter().enumerate() {
            m.validate().map_err(|e| format!("message {i}: {e}"))?;
            match m.role {
                Role::Assistant => {
                    if !pending.is_empty() {
                        return Err(format!("message {i}: assistant turn before tool calls {pending:?} were answered"));
                    }
                    pending = m.tool_calls.iter().map(|c| c.id.as_str()).collect();
                }
                Role::Tool => {
                    let id = m.tool_call_id.as_deref().unwrap_or_default();
                    match pending.iter().position(|p| *p == id) {
                        Some(pos) => {
                            pending.remove(pos);
                        }
                        None => return Err(format!("message {i}: tool result for unknown call {id}")),
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Result of one dispatched tool call.
#[derive(Debug, Clone)]
pub struct Dispatched {
    pub result: ToolResult,
    pub record: ToolCallRecord,
}

/// Routes a model tool call. `offered` lists the tools visible in this loop.
pub trait ToolDispatcher {
    fn dispatch(&mut self, call: &ToolCallRequest, offered: &[ToolSpec]) -> Dispatched;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopOutcome {
    pub final_text: String,
    /// True when the loop hit `max_loop_steps` while the model still wanted tools.
    pub exhausted: bool,
}

/// Alternates chat and dispatch until the model answers without tool calls or
/// `config.max_loop_steps` chat calls have been made. The transcript must
/// already hold the system and user turns.
pub fn run_tool_loop(
    backend: &dyn ChatBackend,
    transcript: &mut Transcript,
    tools: &[ToolSpec],
    dispatcher: &mut dyn ToolDispatcher,
    config: &LlmConfig,
) -> Result<LoopOutcome, LlmError> {
    for _ in 0..config.max_loop_steps.max(1) {
        let completion = chat(backend, transcript.messages(), tools, config)?;
        transcript.chat_calls += 1;
        transcript.usage.add(completion.usage);
        let message = completion.message;
        let calls = message.tool_calls.clone();
        let text = message.content.clone();
        transcript.push(message);
        if calls.is_empty() {
            return Ok(LoopOutcome { final_text: text, exhausted: false });
        }
        answer_calls(transcript, &calls, tools, dispatcher);
    }
    let final_text = transcript.last_assistant().map(|m| m.content.clone()).unwrap_or_default();
    Ok(LoopOutcome { final_text, exhausted: true })
}

fn answer_calls(
    transcript: &mut Transcript,
    calls: &[ToolCallRequest],
    tools: &[ToolSpec],
    dispatcher: &mut dyn ToolDispatcher,
) {
    for call in calls {
        let Dispatched { result, record } = dispatcher.dispatch(call, tools);
        transcript.tool_records.push(record);
        transcript.push(Message::tool(call.id.clone(), result.rendered));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::FnBackend;
    use crate::tools::{ToolName, ToolResult};

    struct Echo {
        seq: u64,
    }

    impl ToolDispatcher for Echo {
        fn dispatch(&mut self, call: &ToolCallRequest, _offered: &[ToolSpec]) -> Dispatched {
            self.seq += 1;
            let result = ToolResult::ok(format!("echo {}", call.arguments), serde_json::Value::Null);
            Dispatched { record: ToolCallRecord::for_result("c0", self.seq, &call.name, &call.arguments, &result, 0), result }
        }
    }

    fn always_tool() -> FnBackend {
        FnBackend::new(|msgs, _| {
            let n = msgs.len();
            Ok(Message::assistant("still looking")
                .with_tool_calls(vec![ToolCallRequest::new(format!("call{n}"), "GetSchema", serde_json::json!({"schema_name": "main"}))]))
        })
    }

    #[test]
    fn immediate_answer_uses_one_call() {
        let backend = FnBackend::new(|_, _| Ok(Message::assistant("done")));
        let mut t = Transcript::new("sys", "q");
        let out = run_tool_loop(&backend, &mut t, &[], &mut Echo { seq: 0 }, &LlmConfig::default()).unwrap();
        assert_eq!(out.final_text, "done");
        assert!(!out.exhausted);
        assert_eq!(t.chat_calls(), 1);
        assert!(t.tool_records().is_empty());
    }

    #[test]
    fn tool_happy_backend_stops_at_step_limit() {
        let backend = always_tool();
        let mut t = Transcript::new("sys", "q");
        let config = LlmConfig { max_loop_steps: 4, ..LlmConfig::default() };
        let specs = vec![ToolName::GetSchema.spec()];
        let out = run_tool_loop(&backend, &mut t, &specs, &mut Echo { seq: 0 }, &config).unwrap();
        assert!(out.exhausted);
        assert_eq!(out.final_text, "still looking");
        assert_eq!(t.chat_calls(), 4);
        assert_eq!(t.tool_records().len(), 4);
        t.check_alternation().unwrap();
    }

    #[test]
    fn alternation_violation_detected() {
        let mut t = Transcript::new("s", "u");
        t.push(Message::assistant("").with_tool_calls(vec![ToolCallRequest::new("a", "GetSchema", serde_json::json!({}))]));
        t.push(Message::assistant("skipped the tool"));
        assert!(t.check_alternation().is_err());
    }
}
