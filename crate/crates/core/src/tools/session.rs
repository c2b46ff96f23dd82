use std::sync::Arc;
use std::time::Instant;

use serde_json::{json, Value};

use super::{ToolCallRecord, ToolLimits, ToolName, ToolResult, ToolSpec};
use crate::context::SchemaView;
use crate::db::{Cell, DbHandle, ExecLimits, ResultTable, TableEntry};
use crate::llm::{Dispatched, ToolCallRequest, ToolDispatcher};
use crate::sandbox::{SandboxSession, SandboxStatus};
use crate::sqltok::quote_ident;

/// Per-candidate tool state: database handle, optional Python session and
/// the call log. Nothing in here is shared between candidates.
pub struct ToolSession {
    candidate_id: String,
    view: Arc<SchemaView>,
    db: DbHandle,
    sandbox: Option<Box<dyn SandboxSession>>,
    limits: ToolLimits,
    next_seq: u64,
    records: Vec<ToolCallRecord>,
}

impl ToolSession {
    pub fn new(
        candidate_id: impl Into<String>,
        view: Arc<SchemaView>,
        db: DbHandle,
        sandbox: Option<Box<dyn SandboxSession>>,
        limits: ToolLimits,
    ) -> Self {
        ToolSession { candidate_id: candidate_id.into(), view, db, sandbox, limits, next_seq: 0, records: Vec::new() }
    }

    pub fn candidate_id(&self) -> &str {
        &self.candidate_id
    }

    pub fn view(&self) -> &SchemaView {
        &self.view
    }

    pub fn db(&self) -> &DbHandle {
        &self.db
    }

    pub fn limits(&self) -> &ToolLimits {
        &self.limits
    }

    pub fn sandbox_mut(&mut self) -> Option<&mut (dyn SandboxSession + 'static)> {
        self.sandbox.as_deref_mut()
    }

    pub fn has_sandbox(&self) -> bool {
        self.sandbox.is_some()
    }

    /// All calls dispatched through this session, in order.
    pub fn records(&self) -> &[ToolCallRecord] {
        &self.records
    }

    fn resolve_table(&self, name: &str) -> Result<&TableEntry, ToolResult> {
        let snap = &self.view.snapshot;
        if let Some(t) = snap.find_table(name) {
            return Ok(t);
        }
        if let Some(group) = self.view.find_group(name) {
            if let Some(t) = snap.find_table(&group.representative) {
                return Ok(t);
            }
        }
        let mut known: Vec<&str> = snap.tables().map(|t| t.qualified_name.as_str()).collect();
        known.truncate(30);
        Err(ToolResult::error(format!(
            "UnknownTable: no table named '{name}'. Known tables include: {}",
            known.join(", ")
        )))
    }

    fn resolve_column<'a>(&self, table: &'a TableEntry, column: &str) -> Result<&'a crate::db::ColumnEntry, ToolResult> {
        table.column(column).ok_or_else(|| {
            let cols: Vec<&str> = table.columns.iter().map(|c| c.name.as_str()).collect();
            ToolResult::error(format!(
                "UnknownColumn: table {} has no column '{column}'. Columns: {}",
                table.qualified_name,
                cols.join(", ")
            ))
        })
    }

    pub fn get_schema(&self, schema_name: &str) -> ToolResult {
        let Some(schema) = self.view.snapshot.schema(schema_name) else {
            return ToolResult::error(format!(
                "UnknownSchema: no schema named '{schema_name}'. Available schemas: {}",
                self.view.snapshot.schema_names().join(", ")
            ));
        };
        let mut lines = Vec::new();
        let mut entries = Vec::new();
        let mut shown_groups = Vec::new();
        for t in &schema.tables {
            match &t.group_tag {
                Some(tag) => {
                    if !shown_groups.contains(tag) {
                        if let Some(g) = self.view.groups.iter().find(|g| &g.group_name == tag && g.schema == schema.name) {
                            lines.push(format!("- {}", g.render()));
                            entries.push(json!({"group": g.group_name, "members": g.member_tables}));
                        }
                        shown_groups.push(tag.clone());
                    }
                }
                None => {
                    lines.push(format!("- {}", t.qualified_name));
                    entries.push(json!(t.qualified_name));
                }
            }
        }
        let rendered = format!("Schema {} has {} table entries:\n{}", schema.name, lines.len(), lines.join("\n"));
        ToolResult::ok(rendered, json!({"schema": schema.name, "tables": entries}))
    }

    pub fn get_table_col(&self, table_name: &str) -> ToolResult {
        let table = match self.resolve_table(table_name) {
            Ok(t) => t,
            Err(e) => return e,
        };
        let mut lines = vec![format!("Table {} ({} rows)", table.qualified_name, table.row_count)];
        if let Some(tag) = &table.group_tag {
            if let Some(g) = self.view.groups.iter().find(|g| &g.group_name == tag) {
                lines.push(format!(
                    "Member of {} ; all members share these columns.",
                    g.render()
                ));
            }
        }
        let mut cols = Vec::new();
        for c in table.columns.iter().filter(|c| !c.all_null) {
            let samples: Vec<String> = c.sample_values.iter().map(|v| truncate_chars(&v.render(), 60)).collect();
            lines.push(format!("- {} {} | samples: {}", c.name, c.declared_type, samples.join(", ")));
            cols.push(json!({
                "name": c.name,
                "type": c.declared_type,
                "samples": c.sample_values.iter().map(Cell::to_json).collect::<Vec<_>>(),
            }));
        }
        ToolResult::ok(lines.join("\n"), json!({"table": table.qualified_name, "columns": cols}))
    }

    pub fn get_col_values(&self, column_name: &str, table_name: &str) -> ToolResult {
        let table = match self.resolve_table(table_name) {
            Ok(t) => t,
            Err(e) => return e,
        };
        let column = match self.resolve_column(table, column_name) {
            Ok(c) => c,
            Err(e) => return e,
        };
        let cap = self.limits.distinct_values_cap;
        let col = quote_ident(&column.name);
        let from = table.sql_ref();
        let limits = self.limits.exploration();
        let values = match self.db.execute_sql(
            &format!("SELECT DISTINCT {col} FROM {from} WHERE {col} IS NOT NULL LIMIT {}", cap),
            ExecLimits { max_rows: cap, ..limits },
        ) {
            Ok(t) => t.rows.into_iter().map(|mut r| r.remove(0)).collect::<Vec<Cell>>(),
            Err(e) => return ToolResult::error(format!("GetColValues failed: {}", e.message)),
        };
        let total = if values.len() == cap {
            match self.db.execute_sql(&format!("SELECT COUNT(DISTINCT {col}) FROM {from}"), limits) {
                Ok(t) => match t.rows.first().and_then(|r| r.first()) {
                    Some(Cell::Integer(n)) => *n as usize,
                    _ => cap,
                },
                Err(_) => cap,
            }
        } else {
            values.len()
        };
        let truncated = total > values.len();
        let mut rendered = format!(
            "Distinct values of {}.{} ({}):\n{}",
            table.qualified_name,
            column.name,
            total,
            values.iter().map(|v| truncate_chars(&v.render(), 200)).collect::<Vec<_>>().join("\n")
        );
        if truncated {
            rendered.push_str(&format!("\n... showing {} of {} distinct values", values.len(), total));
        }
        let mut r = ToolResult::ok(
            rendered,
            json!({"values": values.iter().map(Cell::to_json).collect::<Vec<_>>(), "distinct_total": total}),
        );
        r.truncated = truncated;
        r
    }

    pub fn find_rows(&self, term: &str, column_name: &str, table_name: &str, additional: &[String]) -> ToolResult {
        if term.is_empty() {
            return ToolResult::error("FindRows: term must be non-empty");
        }
        let table = match self.resolve_table(table_name) {
            Ok(t) => t,
            Err(e) => return e,
        };
        let mut projected = Vec::new();
        for name in std::iter::once(column_name).chain(additional.iter().map(String::as_str)) {
            match self.resolve_column(table, name) {
                Ok(c) => projected.push(c.name.clone()),
                Err(e) => return e,
            }
        }
        let cols: Vec<String> = projected.iter().map(|c| quote_ident(c)).collect();
        let sql = format!("SELECT {} FROM {} WHERE {} IS NOT NULL", cols.join(", "), table.sql_ref(), cols[0]);
        let cap = self.limits.find_rows_cap;
        let needle = term.to_lowercase();
        let mut stmt = match self.db.conn().prepare(&sql) {
            Ok(s) => s,
            Err(e) => return ToolResult::error(format!("FindRows failed: {e}")),
        };
        let width = cols.len();
        let mut rows = match stmt.query([]) {
            Ok(r) => r,
            Err(e) => return ToolResult::error(format!("FindRows failed: {e}")),
        };
        let mut matched = Vec::new();
        let mut more = false;
        loop {
            let row = match rows.next() {
                Ok(Some(r)) => r,
                Ok(None) => break,
                Err(e) => return ToolResult::error(format!("FindRows failed: {e}")),
            };
            let key = row.get_ref(0).map(crate::db::cell_from).unwrap_or(Cell::Null);
            if !key.render().to_lowercase().contains(&needle) {
                continue;
            }
            if matched.len() == cap {
                more = true;
                break;
            }
            let mut cells = vec![key];
            for i in 1..width {
                cells.push(row.get_ref(i).map(crate::db::cell_from).unwrap_or(Cell::Null));
            }
            matched.push(cells);
        }
        let table_out = ResultTable::new(projected.clone(), matched);
        let mut rendered = format!(
            "Rows of {} where {} contains '{}':\n{}",
            table.qualified_name,
            column_name,
            term,
            table_out.render_text(cap)
        );
        if more {
            rendered.push_str(&format!("... more than {cap} matching rows; refine the term\n"));
        }
        let mut r = ToolResult::ok(
            rendered,
            json!({
                "columns": projected,
                "rows": table_out.rows.iter().map(|r| r.iter().map(Cell::to_json).collect::<Vec<_>>()).collect::<Vec<_>>(),
            }),
        );
        r.truncated = more;
        r
    }

    pub fn sql_executor(&self, sql: &str) -> ToolResult {
        let limits = self.limits.exploration();
        match self.db.execute_sql(sql, limits) {
            Ok(t) => {
                let mut r = ToolResult::ok(t.render_text(limits.max_rows), serde_json::to_value(&t).unwrap_or(Value::Null));
                r.truncated = t.truncated;
                r
            }
            Err(e) => ToolResult::error(format!("SQL error ({:?}): {}", e.kind, e.message)),
        }
    }

    pub fn python_executor(&mut self, program: &str) -> ToolResult {
        let Some(sandbox) = self.sandbox.as_deref_mut() else {
            return ToolResult::error("PythonExecutor unavailable: no Python sandbox is configured for this run");
        };
        let resp = match sandbox.exec(program) {
            Ok(r) => r,
            Err(e) => return ToolResult::error(format!("{e}. The sandbox was restarted; previously defined variables are gone.")),
        };
        let mut parts = Vec::new();
        if !resp.stdout.is_empty() {
            parts.push(format!("stdout:\n{}", resp.stdout.trim_end()));
        }
        if !resp.value_repr.is_empty() {
            parts.push(format!("value: {}", resp.value_repr));
        }
        match resp.answer() {
            Ok(Some(t)) => parts.push(format!("answer:\n{}", t.render_text(20))),
            Ok(None) => {}
            Err(e) => parts.push(format!("answer could not be read: {e}")),
        }
        let payload = serde_json::to_value(&resp).unwrap_or(Value::Null);
        match resp.status {
            SandboxStatus::Ok => {
                let text = if parts.is_empty() { "(no output)".to_string() } else { parts.join("\n") };
                ToolResult::ok(text, payload)
            }
            SandboxStatus::Error => {
                parts.push(format!("error:\n{}", resp.error));
                ToolResult { rendered: parts.join("\n"), payload, is_error: true, truncated: false }
            }
            SandboxStatus::Timeout => ToolResult {
                rendered: format!("TIMEOUT: {}", resp.error),
                payload,
                is_error: true,
                truncated: false,
            },
        }
    }

    fn route(&mut self, tool: ToolName, args: &Value) -> ToolResult {
        let s = |k: &str| args.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        match tool {
            ToolName::GetSchema => self.get_schema(&s("schema_name")),
            ToolName::GetTableCol => self.get_table_col(&s("table_name")),
            ToolName::GetColValues => self.get_col_values(&s("column_name"), &s("table_name")),
            ToolName::FindRows => {
                let extra: Vec<String> = args
                    .get("additional_columns")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
                    .unwrap_or_default();
                self.find_rows(&s("term"), &s("column_name"), &s("table_name"), &extra)
            }
            ToolName::SQLExecutor => self.sql_executor(&s("sql_query")),
            ToolName::PythonExecutor => self.python_executor(&s("program")),
        }
    }

    /// Validates, routes and logs one call. Failures of any kind come back
    /// as error results; nothing escapes this boundary.
    pub fn dispatch_call(&mut self, call: &ToolCallRequest, offered: &[ToolSpec]) -> Dispatched {
        let started = Instant::now();
        let result = self.evaluate(call, offered).clipped(self.limits.render_budget);
        self.next_seq += 1;
        let record = ToolCallRecord::for_result(
            &self.candidate_id,
            self.next_seq,
            &call.name,
            &call.arguments,
            &result,
            started.elapsed().as_millis() as u64,
        );
        self.records.push(record.clone());
        Dispatched { result, record }
    }

    fn evaluate(&mut self, call: &ToolCallRequest, offered: &[ToolSpec]) -> ToolResult {
        let Some(tool) = ToolName::parse(&call.name) else {
            let names: Vec<&str> = offered.iter().map(|s| s.name.as_str()).collect();
            return ToolResult::error(format!("UnknownTool: '{}'. Available tools: {}", call.name, names.join(", ")));
        };
        let Some(spec) = offered.iter().find(|s| s.name == tool) else {
            let names: Vec<&str> = offered.iter().map(|s| s.name.as_str()).collect();
            return ToolResult::error(format!(
                "UnknownTool: {} is not available at this stage. Available tools: {}",
                call.name,
                names.join(", ")
            ));
        };
        let args: Value = match serde_json::from_str(if call.arguments.trim().is_empty() { "{}" } else { &call.arguments }) {
            Ok(v) => v,
            Err(e) => {
                return ToolResult::error(format!(
                    "BadArguments: arguments are not valid JSON ({e}). Expected {}",
                    spec.signature()
                ))
            }
        };
        if let Err(e) = spec.validate(&args) {
            return ToolResult::error(format!("BadArguments: {e}. Expected {}", spec.signature()));
        }
        self.route(tool, &args)
    }
}

impl ToolDispatcher for ToolSession {
    fn dispatch(&mut self, call: &ToolCallRequest, offered: &[ToolSpec]) -> Dispatched {
        self.dispatch_call(call, offered)
    }
}

fn truncate_chars(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        s.to_string()
    } else {
        let mut out: String = s.chars().take(n).collect();
        out.push('…');
        out
    }
}
