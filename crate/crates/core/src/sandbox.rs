//! Host side of the Python sandbox protocol.
//!
//! The sandbox is a separate process speaking newline-delimited JSON on its
//! standard streams:
//!
//! ```text
//! host    -> {"op":"EXEC","code":"x = 1","request_id":1}
//! sandbox -> {"request_id":1,"status":"OK","stdout":"","value_repr":"","answer_table":null,"error":""}
//! ```
//!
//! User code declares its answer by assigning `answer` (rows, or
//! `{"columns": [...], "rows": [[...]]}`) or by printing CSV between
//! `<<ANSWER` and `ANSWER>>` lines. The variable wins when both are present.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::db::{Cell, ResultTable};
use crate::table_csv;

pub const ANSWER_OPEN: &str = "<<ANSWER";
pub const ANSWER_CLOSE: &str = "ANSWER>>";

/// Name under which the sandbox exposes the read-only connection.
pub const DB_CONNECTION_NAME: &str = "conn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SandboxOp {
    Exec,
    Reset,
    Ping,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub op: SandboxOp,
    #[serde(default)]
    pub code: String,
    pub request_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SandboxStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxResponse {
    pub request_id: u64,
    pub status: SandboxStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub value_repr: String,
    #[serde(default)]
    pub answer_table: Option<Value>,
    #[serde(default)]
    pub error: String,
}

impl SandboxResponse {
    pub fn ok(request_id: u64) -> Self {
        SandboxResponse {
            request_id,
            status: SandboxStatus::Ok,
            stdout: String::new(),
            value_repr: String::new(),
            answer_table: None,
            error: String::new(),
        }
    }

    /// The program's declared answer: `answer_table` if set, otherwise CSV
    /// between the sentinel lines on stdout.
    pub fn answer(&self) -> Result<Option<ResultTable>, String> {
        if let Some(v) = self.answer_table.as_ref().filter(|v| !v.is_null()) {
            return answer_table_from_json(v).map(Some);
        }
        match extract_sentinel_csv(&self.stdout) {
            Some(csv) => table_csv::parse_typed(csv.as_bytes()).map(Some),
            None => Ok(None),
        }
    }
}

fn extract_sentinel_csv(stdout: &str) -> Option<String> {
    let start = stdout.rfind(ANSWER_OPEN)?;
    let body = &stdout[start + ANSWER_OPEN.len()..];
    let end = body.find(ANSWER_CLOSE)?;
    Some(body[..end].trim_matches(|c| c == '\n' || c == '\r').to_string())
}

/// Accepts `{"columns": [...], "rows": [[...]]}` or a bare list of rows
/// (columns then default to `col1..colN`).
pub fn answer_table_from_json(v: &Value) -> Result<ResultTable, String> {
    let (columns, rows) = match v {
        Value::Object(map) => {
            let rows = map.get("rows").and_then(Value::as_array).ok_or("answer_table needs a rows array")?;
            let columns: Vec<String> = match map.get("columns") {
                Some(Value::Array(cols)) => cols
                    .iter()
                    .map(|c| c.as_str().map(str::to_string).unwrap_or_else(|| c.to_string()))
                    .collect(),
                _ => Vec::new(),
            };
            (columns, rows.clone())
        }
        Value::Array(rows) => (Vec::new(), rows.clone()),
        _ => return Err("answer_table must be an object or a list of rows".into()),
    };
    let mut out_rows = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<Cell> = match row {
            Value::Array(items) => items.iter().map(Cell::from_json).collect::<Result<_, _>>()?,
            scalar => vec![Cell::from_json(scalar)?],
        };
        if !columns.is_empty() && cells.len() != columns.len() {
            return Err(format!("answer row {i} has {} values for {} columns", cells.len(), columns.len()));
        }
        out_rows.push(cells);
    }
    let columns = if columns.is_empty() {
        let width = out_rows.first().map_or(0, Vec::len);
        if out_rows.iter().any(|r| r.len() != width) {
            return Err("answer rows have differing lengths".into());
        }
        (1..=width).map(|i| format!("col{i}")).collect()
    } else {
        columns
    };
    Ok(ResultTable::new(columns, out_rows))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SandboxError {
    #[error("sandbox failed to start: {0}")]
    SpawnFailed(String),
    #[error("sandbox process died: {0}")]
    Dead(String),
    #[error("sandbox protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxLimits {
    pub wall_s: u64,
    pub mem_mb: u64,
    pub out_kb: u64,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        SandboxLimits { wall_s: 60, mem_mb: 2048, out_kb: 64 }
    }
}

/// A per-candidate stateful interpreter session.
pub trait SandboxSession: Send {
    fn exec(&mut self, code: &str) -> Result<SandboxResponse, SandboxError>;
    fn reset(&mut self) -> Result<SandboxResponse, SandboxError>;
    fn ping(&mut self) -> Result<SandboxResponse, SandboxError>;
}

/// Starts sessions bound to one database.
pub trait SandboxFactory: Send + Sync {
    fn start(&self, db_location: &std::path::Path) -> Result<Box<dyn SandboxSession>, SandboxError>;
}

/// Spawns an external sandbox program and talks the NDJSON protocol to it.
///
/// The child receives the database path and limits through the environment
/// (`FLEXSQL_DB`, `FLEXSQL_WALL_S`, `FLEXSQL_MEM_MB`, `FLEXSQL_OUT_KB`).
#[derive(Debug, Clone)]
pub struct ProcessSandboxFactory {
    pub command: Vec<String>,
    pub limits: SandboxLimits,
    /// Extra wall-clock allowance before the host kills the child itself.
    pub grace: Duration,
}

impl ProcessSandboxFactory {
    pub fn new(command: Vec<String>, limits: SandboxLimits) -> Self {
        ProcessSandboxFactory { command, limits, grace: Duration::from_secs(2) }
    }
}

impl SandboxFactory for ProcessSandboxFactory {
    fn start(&self, db_location: &std::path::Path) -> Result<Box<dyn SandboxSession>, SandboxError> {
        Ok(Box::new(ProcessSandbox::start(self.clone(), db_location.to_path_buf())?))
    }
}

pub struct ProcessSandbox {
    factory: ProcessSandboxFactory,
    db: PathBuf,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    next_id: u64,
}

impl ProcessSandbox {
    pub fn start(factory: ProcessSandboxFactory, db: PathBuf) -> Result<Self, SandboxError> {
        if !db.exists() {
            return Err(SandboxError::SpawnFailed(format!("database {} does not exist", db.display())));
        }
        let (child, stdin, lines) = spawn(&factory, &db)?;
        let mut s = ProcessSandbox { factory, db, child, stdin, lines, next_id: 0 };
        let pong = s.ping().map_err(|e| SandboxError::SpawnFailed(e.to_string()))?;
        if pong.status != SandboxStatus::Ok {
            return Err(SandboxError::SpawnFailed(format!("PING answered {:?}: {}", pong.status, pong.error)));
        }
        Ok(s)
    }

    fn respawn(&mut self) -> Result<(), SandboxError> {
        let _ = self.child.kill();
        let _ = self.child.wait();
        let (child, stdin, lines) = spawn(&self.factory, &self.db)?;
        self.child = child;
        self.stdin = stdin;
        self.lines = lines;
        Ok(())
    }

    fn request(&mut self, op: SandboxOp, code: &str) -> Result<SandboxResponse, SandboxError> {
        self.next_id += 1;
        let id = self.next_id;
        let line = serde_json::to_string(&SandboxRequest { op, code: code.to_string(), request_id: id })
            .expect("request serializes");
        if writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush()).is_err() {
            let _ = self.respawn();
            return Err(SandboxError::Dead("could not write request; session restarted".into()));
        }
        let wait = Duration::from_secs(self.factory.limits.wall_s) + self.factory.grace;
        loop {
            match self.lines.recv_timeout(wait) {
                Ok(raw) => {
                    let resp: SandboxResponse = serde_json::from_str(&raw)
                        .map_err(|e| SandboxError::Protocol(format!("bad response line {raw:?}: {e}")))?;
                    if resp.request_id < id {
                        continue;
                    }
                    if resp.request_id != id {
                        return Err(SandboxError::Protocol(format!(
                            "expected response {id}, got {}",
                            resp.request_id
                        )));
                    }
                    return Ok(resp);
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.respawn()?;
                    return Ok(SandboxResponse {
                        status: SandboxStatus::Timeout,
                        error: format!(
                            "execution exceeded {}s; the session was restarted and its state cleared",
                            self.factory.limits.wall_s
                        ),
                        ..SandboxResponse::ok(id)
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let _ = self.respawn();
                    return Err(SandboxError::Dead("sandbox exited; session restarted".into()));
                }
            }
        }
    }
}

fn spawn(factory: &ProcessSandboxFactory, db: &std::path::Path) -> Result<(Child, ChildStdin, Receiver<String>), SandboxError> {
    let (program, args) = factory
        .command
        .split_first()
        .ok_or_else(|| SandboxError::SpawnFailed("empty sandbox command".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .env("FLEXSQL_DB", db)
        .env("FLEXSQL_WALL_S", factory.limits.wall_s.to_string())
        .env("FLEXSQL_MEM_MB", factory.limits.mem_mb.to_string())
        .env("FLEXSQL_OUT_KB", factory.limits.out_kb.to_string())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| SandboxError::SpawnFailed(format!("{program}: {e}")))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if !line.trim().is_empty() && tx.send(line).is_err() {
                break;
            }
        }
    });
    Ok((child, stdin, rx))
}

impl SandboxSession for ProcessSandbox {
    fn exec(&mut self, code: &str) -> Result<SandboxResponse, SandboxError> {
        self.request(SandboxOp::Exec, code)
    }

    fn reset(&mut self) -> Result<SandboxResponse, SandboxError> {
        self.request(SandboxOp::Reset, "")
    }

    fn ping(&mut self) -> Result<SandboxResponse, SandboxError> {
        self.request(SandboxOp::Ping, "")
    }
}

impl Drop for ProcessSandbox {
    fn drop(&mut self) {
        self.next_id += 1;
        if let Ok(line) = serde_json::to_string(&SandboxRequest { op: SandboxOp::Shutdown, code: String::new(), request_id: self.next_id }) {
            let _ = writeln!(self.stdin, "{line}");
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A canned reply for [`StubSandbox`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    /// Fires when the submitted code contains this text.
    pub code_contains: String,
    pub status: SandboxStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub value_repr: String,
    #[serde(default)]
    pub answer_table: Option<Value>,
    #[serde(default)]
    pub error: String,
}

impl StubRule {
    pub fn answer(code_contains: impl Into<String>, table: &ResultTable) -> Self {
        let rows: Vec<Value> = table.rows.iter().map(|r| Value::Array(r.iter().map(Cell::to_json).collect())).collect();
        StubRule {
            code_contains: code_contains.into(),
            status: SandboxStatus::Ok,
            stdout: String::new(),
            value_repr: String::new(),
            answer_table: Some(serde_json::json!({ "columns": table.column_names, "rows": rows })),
            error: String::new(),
        }
    }

    pub fn error(code_contains: impl Into<String>, traceback: impl Into<String>) -> Self {
        StubRule {
            code_contains: code_contains.into(),
            status: SandboxStatus::Error,
            stdout: String::new(),
            value_repr: String::new(),
            answer_table: None,
            error: traceback.into(),
        }
    }
}

/// Protocol stub: answers EXEC from a rule list, first match wins. Unmatched
/// code gets an empty OK reply. Every executed snippet is logged.
#[derive(Debug, Clone, Default)]
pub struct StubSandbox {
    rules: Arc<Vec<StubRule>>,
    log: Arc<Mutex<Vec<String>>>,
    next_id: u64,
}

impl StubSandbox {
    pub fn new(rules: Vec<StubRule>) -> Self {
        StubSandbox { rules: Arc::new(rules), log: Arc::default(), next_id: 0 }
    }

    /// Code submitted so far, shared across clones.
    pub fn executed(&self) -> Vec<String> {
        self.log.lock().expect("stub log poisoned").clone()
    }
}

impl SandboxSession for StubSandbox {
    fn exec(&mut self, code: &str) -> Result<SandboxResponse, SandboxError> {
        self.next_id += 1;
        self.log.lock().expect("stub log poisoned").push(code.to_string());
        let mut resp = SandboxResponse::ok(self.next_id);
        if let Some(rule) = self.rules.iter().find(|r| code.contains(&r.code_contains)) {
            resp.status = rule.status;
            resp.stdout = rule.stdout.clone();
            resp.value_repr = rule.value_repr.clone();
            resp.answer_table = rule.answer_table.clone();
            resp.error = rule.error.clone();
        }
        Ok(resp)
    }

    fn reset(&mut self) -> Result<SandboxResponse, SandboxError> {
        self.next_id += 1;
        Ok(SandboxResponse::ok(self.next_id))
    }

    fn ping(&mut self) -> Result<SandboxResponse, SandboxError> {
        self.next_id += 1;
        Ok(SandboxResponse::ok(self.next_id))
    }
}

impl SandboxFactory for StubSandbox {
    fn start(&self, _db_location: &std::path::Path) -> Result<Box<dyn SandboxSession>, SandboxError> {
        Ok(Box::new(StubSandbox { rules: self.rules.clone(), log: self.log.clone(), next_id: 0 }))
    }
}
