//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use flexsql_core::context::{PlanningContext, SchemaView};
use flexsql_core::db::{Cell, DbHandle, Dialect, ResultTable};
use flexsql_core::fixtures;
use flexsql_core::llm::Message;
use flexsql_core::pipeline::TraceEvent;
use tempfile::TempDir;

pub struct Patents {
    pub dir: TempDir,
    pub path: PathBuf,
    pub db: DbHandle,
    pub seed: fixtures::PatentsSeed,
}

pub fn patents() -> Patents {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("patents.db");
    let seed = fixtures::build_patents_db(&path).expect("build patents fixture");
    let db = fixtures::open_patents(&path).expect("open patents fixture");
    Patents { dir, path, db, seed }
}

pub fn context_for(db: &DbHandle, question: &str) -> PlanningContext {
    let view = Arc::new(SchemaView::build(&db.snapshot_hierarchy().expect("snapshot")));
    PlanningContext {
        question: question.to_string(),
        knowledge_summary: String::new(),
        relevant_schemas: view.snapshot.schema_names(),
        view,
        dialect: Dialect::Sqlite,
    }
}

/// Phase marker of the request (from its system prompt), e.g. "output-review".
pub fn phase(messages: &[Message]) -> String {
    let text = messages.first().map(|m| m.content.as_str()).unwrap_or("");
    text.strip_prefix("[phase: ")
        .and_then(|rest| rest.split(']').next())
        .unwrap_or("")
        .to_string()
}

pub fn sql_block(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
}

/// Oracle table of per-patent earlier-citation counts.
pub fn counts_table(with_foreign: bool, with_app: bool, seed: &fixtures::PatentsSeed) -> ResultTable {
    ResultTable::new(
        vec!["patent_id".into(), "earlier_cited".into()],
        seed.earlier_counts(with_foreign, with_app)
            .iter()
            .map(|(k, v)| vec![Cell::Text(k.to_string()), Cell::Integer(*v)])
            .collect(),
    )
}

/// Trace as JSON lines without timestamps, for run-to-run comparison.
pub fn timeless(events: &[TraceEvent]) -> String {
    events
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.timestamp = 0;
            serde_json::to_string(&e).expect("event serializes")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
