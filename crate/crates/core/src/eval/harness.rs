//! Runs the pipeline over a manifest with a bounded worker pool.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{aggregate_report, extract_tables, BenchmarkItem, ItemEvaluation, Report, RunRecord, SampleStats, ScoreOptions};
use crate::config::PipelineConfig;
use crate::context::Document;
use crate::db::open_database;
use crate::pipeline::{answer_question, FinalAnswer, Language, Runtime};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    /// Items evaluated at once.
    pub workers: usize,
    pub score: ScoreOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { workers: 1, score: ScoreOptions::default() }
    }
}

/// Turns one answer into per-candidate records. Each of the K candidates is
/// one sample, in candidate order.
pub fn evaluate_answer(item: &BenchmarkItem, answer: &FinalAnswer, opts: &ScoreOptions) -> ItemEvaluation {
    let mut candidates: Vec<_> = answer.candidates.iter().collect();
    candidates.sort_by_key(|c| c.index);
    let records = candidates
        .into_iter()
        .map(|c| {
            let stats = SampleStats {
                language: c.language(),
                repairs: c.repair_count,
                backtracks: c.backtrack_count,
                tool_counts: c.tool_counts.clone(),
            };
            let sql = c.program.as_ref().filter(|p| p.language == Language::Sql).map(|p| p.source.clone());
            RunRecord::scored(&item.id, c.index, sql, c.table().cloned(), &item.golds, stats, opts)
        })
        .collect();
    ItemEvaluation {
        item_id: item.id.clone(),
        dataset: item.dataset.clone(),
        records,
        golds: item.golds.clone(),
        error: None,
        predicted_tables: answer.final_sql.as_deref().map(|s| extract_tables(s).tables).unwrap_or_default(),
    }
}

fn errored(item: &BenchmarkItem, message: String) -> ItemEvaluation {
    tracing::warn!(item = %item.id, "{message}");
    ItemEvaluation {
        item_id: item.id.clone(),
        dataset: item.dataset.clone(),
        records: Vec::new(),
        golds: item.golds.clone(),
        error: Some(message),
        predicted_tables: Default::default(),
    }
}

fn run_item<R>(item: &BenchmarkItem, config: &PipelineConfig, runtime_for: &R, opts: &ScoreOptions) -> ItemEvaluation
where
    R: Fn(&BenchmarkItem) -> Result<Runtime, String>,
{
    if !item.db.exists() {
        return errored(item, format!("database not found: {}", item.db.display()));
    }
    let db = open_database(&item.db, config.dialect, true).and_then(|mut db| {
        for (name, path) in &item.attach {
            db.attach(name, path)?;
        }
        Ok(db)
    });
    let db = match db {
        Ok(db) => db,
        Err(e) => return errored(item, e.to_string()),
    };
    let docs: Result<Vec<Document>, _> = item.external_docs.iter().map(Document::read).collect();
    let docs = match docs {
        Ok(d) => d,
        Err(e) => return errored(item, format!("cannot read document: {e}")),
    };
    let runtime = match runtime_for(item) {
        Ok(r) => r,
        Err(e) => return errored(item, e),
    };
    let answer = answer_question(&item.question, &db, &docs, config, &runtime);
    evaluate_answer(item, &answer, opts)
}

/// Evaluates every item (per-item failures are recorded, never fatal) and
/// aggregates the report with K from `config`.
pub fn run_benchmark<R>(items: &[BenchmarkItem], config: &PipelineConfig, runtime_for: R, opts: &BenchOptions) -> Report
where
    R: Fn(&BenchmarkItem) -> Result<Runtime, String> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ItemEvaluation>>> = Mutex::new(vec![None; items.len()]);
    let workers = opts.workers.clamp(1, items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let eval = run_item(item, config, &runtime_for, &opts.score);
                slots.lock().expect("result slots poisoned")[i] = Some(eval);
            });
        }
    });
    let evaluated = slots.into_inner().expect("result slots poisoned").into_iter().flatten().collect();
    aggregate_report(evaluated, config.k, &opts.score)
}
