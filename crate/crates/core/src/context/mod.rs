//! Pre-planning preprocessing and schema routing.
//!
//! The planner never sees the raw snapshot. It sees a [`SchemaView`]: all-null
//! columns pruned and date-suffixed table families folded into groups.

mod grouping;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::SchemaSnapshot;
use crate::llm::{chat, run_tool_loop, ChatBackend, LlmConfig, LlmError, Message, Transcript};
use crate::prompts;
use crate::tools::{specs, ToolName, ToolSession};

pub use grouping::{group_time_suffix_tables, SuffixPattern, TableGroup};

/// Planning view of the database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaView {
    pub snapshot: SchemaSnapshot,
    pub groups: Vec<TableGroup>,
}

impl SchemaView {
    /// Prunes and groups a raw snapshot with the default suffix patterns.
    pub fn build(raw: &SchemaSnapshot) -> SchemaView {
        SchemaView::with_patterns(raw, &SuffixPattern::defaults())
    }

    pub fn with_patterns(raw: &SchemaSnapshot, patterns: &[SuffixPattern]) -> SchemaView {
        let pruned = prune_null_columns(raw);
        let (snapshot, groups) = group_time_suffix_tables(&pruned, patterns);
        SchemaView { snapshot, groups }
    }

    /// Looks a group up by name, accepting `NAME`, `NAME_*` or `schema.NAME_*`.
    pub fn find_group(&self, name: &str) -> Option<&TableGroup> {
        let wanted = name.trim_end_matches('*').trim_end_matches('_');
        self.groups.iter().find(|g| {
            g.group_name.eq_ignore_ascii_case(wanted)
                || format!("{}.{}", g.schema, g.group_name).eq_ignore_ascii_case(wanted)
        })
    }
}

/// Drops every column flagged all-null. Tables without rows keep their columns.
pub fn prune_null_columns(snapshot: &SchemaSnapshot) -> SchemaSnapshot {
    let mut out = snapshot.clone();
    for schema in &mut out.schemas {
        for table in &mut schema.tables {
            table.columns.retain(|c| !c.all_null);
        }
    }
    out
}

/// An external reference document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub name: String,
    pub text: String,
}

impl Document {
    pub fn read(path: impl Into<PathBuf>) -> std::io::Result<Document> {
        let path = path.into();
        let text = std::fs::read_to_string(&path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Document { name, text })
    }
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("knowledge summarization failed: {0}")]
    Summarize(#[source] LlmError),
    #[error("schema routing failed: {0}")]
    Routing(#[source] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub text: String,
    pub llm_calls: usize,
    pub clipped: bool,
}

pub const SUMMARY_CLIP_NOTICE: &str = "\n[summary clipped]";

/// Extracts question-relevant knowledge from the documents in one call.
/// No documents means no call and an empty summary.
pub fn summarize_documents(
    docs: &[Document],
    question: &str,
    backend: &dyn ChatBackend,
    config: &LlmConfig,
    max_chars: usize,
) -> Result<Summary, ContextError> {
    if docs.is_empty() {
        return Ok(Summary { text: String::new(), llm_calls: 0, clipped: false });
    }
    let mut user = format!("Question: {question}\n\n");
    for d in docs {
        user.push_str(&format!("### Document: {}\n{}\n\n", d.name, d.text));
    }
    let messages = [Message::system(prompts::SUMMARIZE), Message::user(user)];
    let reply = chat(backend, &messages, &[], config).map_err(ContextError::Summarize)?;
    let mut text = reply.message.content.trim().to_string();
    let mut clipped = false;
    if text.chars().count() > max_chars {
        let keep = max_chars.saturating_sub(SUMMARY_CLIP_NOTICE.chars().count());
        text = text.chars().take(keep).collect::<String>() + SUMMARY_CLIP_NOTICE;
        clipped = true;
    }
    Ok(Summary { text, llm_calls: 1, clipped })
}

#[derive(Debug, Clone)]
pub struct RouteOutcome {
    pub schemas: Vec<String>,
    pub llm_calls: usize,
    /// True when the model never named a valid schema and all were kept.
    pub fell_back: bool,
    pub transcript: Option<Transcript>,
}

/// Attempts before falling back to every schema.
pub const ROUTING_ATTEMPTS: usize = 2;

const ROUTE_MARKER: &str = "RELEVANT_SCHEMAS:";

fn parse_route(text: &str, known: &[String]) -> Vec<String> {
    let Some(line) = text.lines().rev().find(|l| l.trim_start().to_uppercase().starts_with(ROUTE_MARKER)) else {
        return Vec::new();
    };
    let list = &line.trim_start()[ROUTE_MARKER.len()..];
    let mut out: Vec<String> = Vec::new();
    for raw in list.split(',') {
        let name = raw.trim().trim_matches(|c| c == '"' || c == '`' || c == '\'');
        if let Some(k) = known.iter().find(|k| k.eq_ignore_ascii_case(name)) {
            if !out.contains(k) {
                out.push(k.clone());
            }
        }
    }
    out
}

/// Picks the schemas worth planning over. Single-schema databases short-circuit.
pub fn route_schemas(
    question: &str,
    backend: &dyn ChatBackend,
    config: &LlmConfig,
    session: &mut ToolSession,
) -> Result<RouteOutcome, ContextError> {
    let known = session.view().snapshot.schema_names();
    if known.len() <= 1 {
        return Ok(RouteOutcome { schemas: known, llm_calls: 0, fell_back: false, transcript: None });
    }
    let tools = specs(&[ToolName::GetSchema, ToolName::GetTableCol]);
    let user = format!(
        "Question: {question}\n\nSchemas in this database: {}\n\nWhich schemas are needed?",
        known.join(", ")
    );
    let mut transcript = Transcript::new(prompts::ROUTE, user);
    for attempt in 1..=ROUTING_ATTEMPTS {
        let out = run_tool_loop(backend, &mut transcript, &tools, session, config).map_err(ContextError::Routing)?;
        let chosen = parse_route(&out.final_text, &known);
        if !chosen.is_empty() {
            let llm_calls = transcript.chat_calls();
            return Ok(RouteOutcome { schemas: chosen, llm_calls, fell_back: false, transcript: Some(transcript) });
        }
        if attempt < ROUTING_ATTEMPTS {
            transcript.push(Message::user(format!(
                "None of the names you gave is a schema of this database. Valid schemas: {}. \
                 End your reply with a line `{ROUTE_MARKER} <names>`.",
                known.join(", ")
            )));
        }
    }
    tracing::warn!("schema routing produced no valid schema; keeping all {}", known.len());
    let llm_calls = transcript.chat_calls();
    Ok(RouteOutcome { schemas: known, llm_calls, fell_back: true, transcript: Some(transcript) })
}

/// Everything the planner grounds itself in.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub question: String,
    pub knowledge_summary: String,
    pub view: Arc<SchemaView>,
    pub relevant_schemas: Vec<String>,
    pub dialect: crate::db::Dialect,
}

impl PlanningContext {
    pub fn validate(&self) -> Result<(), String> {
        let names = self.view.snapshot.schema_names();
        if let Some(bad) = self.relevant_schemas.iter().find(|s| !names.contains(s)) {
            return Err(format!("relevant schema {bad} is not in the snapshot"));
        }
        if !names.is_empty() && self.relevant_schemas.is_empty() {
            return Err("relevant schema set is empty".into());
        }
        Ok(())
    }

    /// Question, knowledge and schema-name header shared by the stage prompts.
    pub fn header(&self) -> String {
        let mut s = format!("Question: {}\n", self.question);
        if !self.knowledge_summary.is_empty() {
            s.push_str(&format!("\nBackground knowledge:\n{}\n", self.knowledge_summary));
        }
        s.push_str(&format!("\nDatabase: {}\n", self.view.snapshot.database_name));
        s.push_str(&format!("Relevant schemas: {}\n", self.relevant_schemas.join(", ")));
        s
    }

    /// Compact table/column listing of the relevant schemas.
    pub fn schema_outline(&self) -> String {
        let mut s = String::new();
        for schema in self.view.snapshot.schemas.iter().filter(|x| self.relevant_schemas.contains(&x.name)) {
            let mut seen_groups = Vec::new();
            for t in &schema.tables {
                let label = match &t.group_tag {
                    Some(tag) if seen_groups.contains(tag) => continue,
                    Some(tag) => {
                        seen_groups.push(tag.clone());
                        self.view.find_group(tag).map(|g| g.render()).unwrap_or_else(|| t.qualified_name.clone())
                    }
                    None => t.qualified_name.clone(),
                };
                let cols: Vec<String> = t.columns.iter().map(|c| format!("{} {}", c.name, c.declared_type)).collect();
                s.push_str(&format!("- {label}({})\n", cols.join(", ")));
            }
        }
        s
    }
}
