//! Client for OpenAI-compatible `POST /v1/chat/completions` endpoints.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ChatBackend, Completion, LlmConfig, LlmError, Message, Role, ToolCallRequest, Usage};
use crate::tools::ToolSpec;

const MAX_ATTEMPTS: u32 = 3;

/// Stateless apart from the optional rate limiter; share it across workers.
pub struct HttpBackend {
    api_key: Option<String>,
    bucket: Mutex<TokenBucket>,
}

struct TokenBucket {
    tokens: f64,
    last: Instant,
}

impl HttpBackend {
    pub fn new(api_key: Option<String>) -> Self {
        HttpBackend {
            api_key,
            bucket: Mutex::new(TokenBucket { tokens: 1.0, last: Instant::now() }),
        }
    }

    /// Reads the key from the environment variable named in the config.
    pub fn from_env(config: &LlmConfig) -> Self {
        HttpBackend::new(std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()))
    }

    fn throttle(&self, rate: Option<f64>) {
        let Some(rate) = rate.filter(|r| *r > 0.0) else { return };
        loop {
            let wait = {
                let mut b = self.bucket.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                b.tokens = (b.tokens + now.duration_since(b.last).as_secs_f64() * rate).min(rate.max(1.0));
                b.last = now;
                if b.tokens >= 1.0 {
                    b.tokens -= 1.0;
                    return;
                }
                (1.0 - b.tokens) / rate
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }

    fn url(config: &LlmConfig) -> String {
        let base = config.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

/// Request body in the chat-completions wire shape.
pub(crate) fn request_body(messages: &[Message], tools: &[ToolSpec], config: &LlmConfig) -> Value {
    let messages: Vec<Value> = messages.iter().map(wire_message).collect();
    let mut body = json!({
        "model": config.model_id,
        "messages": messages,
        "temperature": config.temperature,
        "reasoning_effort": config.reasoning_effort,
        "stream": false,
    });
    if !tools.is_empty() {
        body["tools"] = Value::Array(tools.iter().map(ToolSpec::to_wire).collect());
        body["tool_choice"] = json!("auto");
    }
    body
}

fn wire_message(m: &Message) -> Value {
    let mut v = json!({ "role": m.role, "content": m.content });
    if !m.tool_calls.is_empty() {
        v["tool_calls"] = m
            .tool_calls
            .iter()
            .map(|c| json!({"id": c.id, "type": "function", "function": {"name": c.name, "arguments": c.arguments}}))
            .collect();
    }
    if let Some(id) = &m.tool_call_id {
        v["tool_call_id"] = json!(id);
    }
    v
}

/// Parses `choices[0].message` and `usage` from a response body.
pub(crate) fn parse_response(body: &Value) -> Result<Completion, LlmError> {
    let msg = body
        .pointer("/choices/0/message")
        .ok_or_else(|| LlmError::Protocol(format!("response has no choices[0].message: {body}")))?;
    let content = msg.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
    let mut tool_calls = Vec::new();
    if let Some(calls) = msg.get("tool_calls").and_then(Value::as_array) {
        for (i, c) in calls.iter().enumerate() {
            let name = c
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| LlmError::Protocol(format!("tool call {i} has no function name")))?;
            let arguments = match c.pointer("/function/arguments") {
                Some(Value::String(s)) => s.clone(),
                Some(other) => other.to_string(),
                None => "{}".to_string(),
            };
            let id = c.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("call_{i}"));
            tool_calls.push(ToolCallRequest { id, name: name.to_string(), arguments });
        }
    }
    let usage = body
        .get("usage")
        .map(|u| {
            let get = |k: &str| u.get(k).and_then(Value::as_u64).unwrap_or(0);
            Usage {
                prompt_tokens: get("prompt_tokens"),
                completion_tokens: get("completion_tokens"),
                total_tokens: get("total_tokens"),
            }
        })
        .unwrap_or_default();
    Ok(Completion {
        message: Message { role: Role::Assistant, content, tool_calls, tool_call_id: None },
        usage,
    })
}

enum Attempt {
    Done(Completion),
    Retry(LlmError),
    Fail(LlmError),
}

impl HttpBackend {
    fn attempt(&self, body: &Value, config: &LlmConfig, attempt: u32) -> Attempt {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.request_timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(Self::url(config)).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(LlmError::Transport { attempts: attempt, message: e.to_string() }),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(LlmError::Transport { attempts: attempt, message: e.to_string() }),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(LlmError::ExhaustedRetries { attempts: attempt, last: format!("HTTP {status}: {text}") });
        }
        if status >= 400 {
            return Attempt::Fail(LlmError::Protocol(format!("HTTP {status}: {text}")));
        }
        match serde_json::from_str::<Value>(&text) {
            Ok(v) => match parse_response(&v) {
                Ok(c) => Attempt::Done(c),
                Err(e) => Attempt::Fail(e),
            },
            Err(e) => Attempt::Fail(LlmError::Protocol(format!("invalid JSON response: {e}"))),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, messages: &[Message], tools: &[ToolSpec], config: &LlmConfig) -> Result<Completion, LlmError> {
        let body = request_body(messages, tools, config);
        let mut last = LlmError::Transport { attempts: 0, message: "no attempt made".into() };
        for attempt in 1..=MAX_ATTEMPTS {
            self.throttle(config.requests_per_second);
            match self.attempt(&body, config, attempt) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => last = e,
            }
            if attempt < MAX_ATTEMPTS {
                thread::sleep(Duration::from_millis(config.retry_backoff_ms << (attempt - 1)));
            }
        }
        Err(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::ToolName;

    #[test]
    fn body_uses_chat_completions_shape() {
        let msgs = vec![
            Message::system("s"),
            Message::user("q"),
            Message::assistant("").with_tool_calls(vec![ToolCallRequest::new("c1", "GetSchema", json!({"schema_name": "main"}))]),
            Message::tool("c1", "tables"),
        ];
        let body = request_body(&msgs, &[ToolName::GetSchema.spec()], &LlmConfig::default());
        assert_eq!(body["model"], "gpt-oss-120b");
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["reasoning_effort"], "high");
        assert_eq!(body["stream"], false);
        assert_eq!(body["messages"][2]["tool_calls"][0]["function"]["arguments"], "{\"schema_name\":\"main\"}");
        assert_eq!(body["messages"][3]["tool_call_id"], "c1");
        assert_eq!(body["tools"][0]["type"], "function");
        assert_eq!(body["tools"][0]["function"]["name"], "GetSchema");
    }

    #[test]
    fn parses_tool_call_response() {
        let v = json!({
            "choices": [{"message": {"role": "assistant", "content": null,
                "tool_calls": [{"id": "x", "type": "function", "function": {"name": "FindRows", "arguments": "{\"term\":\"a\"}"}}]}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 4, "total_tokens": 7}
        });
        let c = parse_response(&v).unwrap();
        assert!(c.message.content.is_empty());
        assert_eq!(c.message.tool_calls[0].name, "FindRows");
        assert_eq!(c.usage.total_tokens, 7);
        assert!(parse_response(&json!({"error": "x"})).is_err());
    }

    #[test]
    fn url_joining() {
        let mut c = LlmConfig { endpoint: "http://h:1/".into(), ..LlmConfig::default() };
        assert_eq!(HttpBackend::url(&c), "http://h:1/v1/chat/completions");
        c.endpoint = "http://h:1/v1".into();
        assert_eq!(HttpBackend::url(&c), "http://h:1/v1/chat/completions");
    }
}
