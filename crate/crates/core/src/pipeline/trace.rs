use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// One line of the JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub candidate_id: String,
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TraceEvent {
    pub fn new(candidate_id: &str, phase: &str) -> TraceEvent {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        TraceEvent {
            timestamp,
            candidate_id: candidate_id.to_string(),
            phase: phase.to_string(),
            tool_name: None,
            digest: None,
            verdict: None,
            tokens: 0,
            detail: None,
        }
    }

    pub fn tokens(mut self, tokens: u64) -> Self {
        self.tokens = tokens;
        self
    }

    pub fn verdict(mut self, verdict: impl ToString) -> Self {
        self.verdict = Some(verdict.to_string());
        self
    }

    pub fn digest(mut self, digest: impl Into<String>) -> Self {
        self.digest = Some(digest.into());
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// Shared, append-only event sink.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl TraceLog {
    pub fn push(&self, event: TraceEvent) {
        self.events.lock().expect("trace poisoned").push(event);
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().expect("trace poisoned").clone()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in self.events() {
            s.push_str(&serde_json::to_string(&e).expect("trace event serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

/// Reads a JSONL trace; blank lines are skipped.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<TraceEvent>, String> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_omits_empty_fields() {
        let log = TraceLog::default();
        log.push(TraceEvent::new("c1", "review_output").verdict("OK").tokens(12));
        let text = log.to_jsonl();
        assert!(!text.contains("tool_name"));
        let back = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, log.events());
    }
}
