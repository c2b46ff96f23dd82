//! The six database-interaction tools and their dispatcher.

mod session;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::db::ExecLimits;

pub use session::ToolSession;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToolName {
    GetSchema,
    GetTableCol,
    GetColValues,
    FindRows,
    SQLExecutor,
    PythonExecutor,
}

impl ToolName {
    pub const ALL: [ToolName; 6] = [
        ToolName::GetSchema,
        ToolName::GetTableCol,
        ToolName::GetColValues,
        ToolName::FindRows,
        ToolName::SQLExecutor,
        ToolName::PythonExecutor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::GetSchema => "GetSchema",
            ToolName::GetTableCol => "GetTableCol",
            ToolName::GetColValues => "GetColValues",
            ToolName::FindRows => "FindRows",
            ToolName::SQLExecutor => "SQLExecutor",
            ToolName::PythonExecutor => "PythonExecutor",
        }
    }

    pub fn parse(name: &str) -> Option<ToolName> {
        ToolName::ALL.into_iter().find(|t| t.as_str() == name)
    }

    pub fn spec(self) -> ToolSpec {
        let p = |name: &str, kind: ParamKind, required: bool, description: &str| ParamSpec {
            name: name.to_string(),
            kind,
            required,
            description: description.to_string(),
        };
        use ParamKind::{String as S, StringArray as A};
        let (description, parameters) = match self {
            ToolName::GetSchema => (
                "List the tables of one schema. Tables that differ only by a date suffix are shown as one group.",
                vec![p("schema_name", S, true, "Schema name, e.g. Transportation")],
            ),
            ToolName::GetTableCol => (
                "Show a table's columns with their declared types and up to three sample values.",
                vec![p("table_name", S, true, "Fully qualified table name")],
            ),
            ToolName::GetColValues => (
                "List the distinct non-null values stored in one column.",
                vec![
                    p("column_name", S, true, "Column to inspect"),
                    p("table_name", S, true, "Table containing the column"),
                ],
            ),
            ToolName::FindRows => (
                "Case-insensitive keyword search within a column; returns matching rows, optionally with other columns of the same table.",
                vec![
                    p("term", S, true, "Text to search for"),
                    p("column_name", S, true, "Column to search"),
                    p("table_name", S, true, "Table containing the column"),
                    p("additional_columns", A, false, "Other columns to include in the output"),
                ],
            ),
            ToolName::SQLExecutor => (
                "Execute a read-only SQL query and return the result set or the error message.",
                vec![p("sql_query", S, true, "SQL query to run")],
            ),
            ToolName::PythonExecutor => (
                "Execute Python code in a stateful sandbox. A read-only database connection is available as `conn`. Variables persist across calls.",
                vec![p("program", S, true, "Python source to execute")],
            ),
        };
        ToolSpec { name: self, description: description.to_string(), parameters }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    String,
    StringArray,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: ToolName,
    pub description: String,
    pub parameters: Vec<ParamSpec>,
}

impl ToolSpec {
    /// Function definition in the chat-completions `tools` shape.
    pub fn to_wire(&self) -> Value {
        let mut properties = serde_json::Map::new();
        for p in &self.parameters {
            let schema = match p.kind {
                ParamKind::String => json!({"type": "string", "description": p.description}),
                ParamKind::StringArray => {
                    json!({"type": "array", "items": {"type": "string"}, "description": p.description})
                }
            };
            properties.insert(p.name.clone(), schema);
        }
        let required: Vec<&str> = self.parameters.iter().filter(|p| p.required).map(|p| p.name.as_str()).collect();
        json!({
            "type": "function",
            "function": {
                "name": self.name.as_str(),
                "description": self.description,
                "parameters": {"type": "object", "properties": properties, "required": required},
            }
        })
    }

    /// Checks parsed arguments against the parameter schema.
    pub fn validate(&self, args: &Value) -> Result<(), String> {
        let obj = args.as_object().ok_or("arguments must be a JSON object")?;
        for p in &self.parameters {
            match (obj.get(&p.name), p.kind) {
                (None | Some(Value::Null), _) if p.required => {
                    return Err(format!("missing required argument `{}`", p.name))
                }
                (None | Some(Value::Null), _) => {}
                (Some(Value::String(_)), ParamKind::String) => {}
                (Some(Value::Array(items)), ParamKind::StringArray) if items.iter().all(Value::is_string) => {}
                (Some(other), kind) => {
                    return Err(format!("argument `{}` must be {kind:?}, got {other}", p.name));
                }
            }
        }
        if let Some(extra) = obj.keys().find(|k| !self.parameters.iter().any(|p| &p.name == *k)) {
            return Err(format!("unknown argument `{extra}`"));
        }
        Ok(())
    }

    /// Human-readable signature, used in error feedback.
    pub fn signature(&self) -> String {
        let params: Vec<String> = self
            .parameters
            .iter()
            .map(|p| {
                let ty = match p.kind {
                    ParamKind::String => "string",
                    ParamKind::StringArray => "string[]",
                };
                if p.required {
                    format!("{}: {ty}", p.name)
                } else {
                    format!("{}?: {ty}", p.name)
                }
            })
            .collect();
        format!("{}({})", self.name, params.join(", "))
    }
}

pub fn specs(names: &[ToolName]) -> Vec<ToolSpec> {
    names.iter().map(|n| n.spec()).collect()
}

/// Prompt-ready tool output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub rendered: String,
    pub payload: Value,
    pub is_error: bool,
    #[serde(default)]
    pub truncated: bool,
}

impl ToolResult {
    pub fn ok(rendered: impl Into<String>, payload: Value) -> Self {
        ToolResult { rendered: rendered.into(), payload, is_error: false, truncated: false }
    }

    pub fn error(message: impl Into<String>) -> Self {
        let message = message.into();
        ToolResult { payload: json!({ "error": message }), rendered: message, is_error: true, truncated: false }
    }

    /// Clips `rendered` to `budget` characters, appending a marker.
    pub fn clipped(mut self, budget: usize) -> Self {
        if self.rendered.chars().count() > budget {
            const MARK: &str = "\n... [output truncated]";
            let keep = budget.saturating_sub(MARK.chars().count());
            let mut s: String = self.rendered.chars().take(keep).collect();
            s.push_str(MARK);
            if s.chars().count() > budget {
                s = s.chars().take(budget).collect();
            }
            self.rendered = s;
            self.truncated = true;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub candidate_id: String,
    pub sequence_no: u64,
    pub tool_name: String,
    pub arguments: Value,
    pub result_digest: String,
    pub duration_ms: u64,
    pub truncated: bool,
    pub is_error: bool,
}

impl ToolCallRecord {
    pub fn for_result(candidate_id: &str, sequence_no: u64, tool_name: &str, raw_arguments: &str, result: &ToolResult, duration_ms: u64) -> Self {
        let arguments = serde_json::from_str(raw_arguments).unwrap_or_else(|_| Value::String(raw_arguments.to_string()));
        let digest = Sha256::digest(result.rendered.as_bytes());
        ToolCallRecord {
            candidate_id: candidate_id.to_string(),
            sequence_no,
            tool_name: tool_name.to_string(),
            arguments,
            result_digest: hex::encode(&digest[..8]),
            duration_ms,
            truncated: result.truncated,
            is_error: result.is_error,
        }
    }
}

/// Counts per tool name.
pub fn count_by_tool<'a>(records: impl IntoIterator<Item = &'a ToolCallRecord>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.tool_name.clone()).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolLimits {
    pub distinct_values_cap: usize,
    pub find_rows_cap: usize,
    pub exploration_max_rows: usize,
    pub exploration_timeout_s: u64,
    pub render_budget: usize,
}

impl Default for ToolLimits {
    fn default() -> Self {
        ToolLimits {
            distinct_values_cap: 50,
            find_rows_cap: 20,
            exploration_max_rows: 100,
            exploration_timeout_s: 30,
            render_budget: 4000,
        }
    }
}

impl ToolLimits {
    pub fn exploration(&self) -> ExecLimits {
        ExecLimits {
            max_rows: self.exploration_max_rows,
            timeout: std::time::Duration::from_secs(self.exploration_timeout_s),
        }
    }
}
