//! Benchmark scoring: any-of-N gold matching, Pass@k, Majority@k, micro
//! credit, table-level schema linking and report aggregation.

mod harness;
mod manifest;
mod tables;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::db::{results_equivalent, Cell, NumTolerance, ResultTable};
use crate::pipeline::{majority_vote, Candidate, CandidateStatus, Language, Plan, Program};

pub use harness::{evaluate_answer, run_benchmark, BenchOptions};
pub use manifest::{load_manifest, parse_manifest, BenchmarkItem, GoldAnswer, ManifestError};
pub use tables::{extract_tables, qualify_against, schema_linking_prf, Extraction, ParseWarning, Prf};

/// How a prediction is compared against a gold table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub tolerance: NumTolerance,
    /// Compare column names too. Off by default: gold headers rarely match aliases.
    pub match_column_names: bool,
    /// Let the prediction carry extra columns; gold columns are then located
    /// by name (case-insensitively).
    pub allow_extra_columns: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions { tolerance: NumTolerance::default(), match_column_names: false, allow_extra_columns: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub correct: bool,
    pub matched_gold_index: Option<usize>,
    pub micro_credit: f64,
}

impl Score {
    pub const WRONG: Score = Score { correct: false, matched_gold_index: None, micro_credit: 0.0 };
}

fn relabel(table: &ResultTable, names: &[String]) -> ResultTable {
    ResultTable::new(names.to_vec(), table.rows.clone())
}

fn project(pred: &ResultTable, gold_columns: &[String]) -> Option<ResultTable> {
    let idx: Vec<usize> = gold_columns
        .iter()
        .map(|g| pred.column_names.iter().position(|p| p.eq_ignore_ascii_case(g)))
        .collect::<Option<_>>()?;
    let rows = pred.rows.iter().map(|r| idx.iter().map(|&i| r[i].clone()).collect()).collect();
    Some(ResultTable::new(gold_columns.to_vec(), rows))
}

fn matches_gold(pred: &ResultTable, gold: &GoldAnswer, opts: &ScoreOptions) -> bool {
    let g = &gold.result;
    let candidate = if pred.column_names.len() == g.column_names.len() {
        if opts.match_column_names {
            pred.clone()
        } else {
            relabel(pred, &g.column_names)
        }
    } else if opts.allow_extra_columns && pred.column_names.len() > g.column_names.len() {
        match project(pred, &g.column_names) {
            Some(t) => t,
            None => return false,
        }
    } else {
        return false;
    };
    results_equivalent(&candidate, g, gold.order_sensitive, opts.tolerance)
}

/// Correct when the prediction equals any gold; credit is 1/N against the
/// first matching gold.
pub fn score_result(pred: &ResultTable, golds: &[GoldAnswer], opts: &ScoreOptions) -> Score {
    match golds.iter().position(|g| matches_gold(pred, g, opts)) {
        Some(i) => Score { correct: true, matched_gold_index: Some(i), micro_credit: 1.0 / golds.len() as f64 },
        None => Score::WRONG,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub language: Option<Language>,
    pub repairs: u32,
    pub backtracks: u32,
    pub tool_counts: BTreeMap<String, u64>,
}

/// One scored sample (candidate) of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    /// 1-based.
    pub sample_index: usize,
    pub final_sql: Option<String>,
    #[serde(skip)]
    pub final_result: Option<ResultTable>,
    pub correct: bool,
    pub matched_gold_index: Option<usize>,
    pub stats: SampleStats,
}

impl RunRecord {
    /// Scores `result` (None for a failed sample) and builds the record.
    pub fn scored(
        item_id: &str,
        sample_index: usize,
        final_sql: Option<String>,
        result: Option<ResultTable>,
        golds: &[GoldAnswer],
        stats: SampleStats,
        opts: &ScoreOptions,
    ) -> RunRecord {
        let score = result.as_ref().map_or(Score::WRONG, |r| score_result(r, golds, opts));
        RunRecord {
            item_id: item_id.to_string(),
            sample_index,
            final_sql,
            final_result: result,
            correct: score.correct,
            matched_gold_index: score.matched_gold_index,
            stats,
        }
    }
}

/// Everything known about one item after a run: its samples, golds and
/// the tables named by the final SQL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEvaluation {
    pub item_id: String,
    pub dataset: String,
    pub records: Vec<RunRecord>,
    #[serde(skip)]
    pub golds: Vec<GoldAnswer>,
    /// Set when the item could not be run at all.
    pub error: Option<String>,
    pub predicted_tables: BTreeSet<String>,
}

impl ItemEvaluation {
    fn first(&self, k: usize) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(move |r| r.sample_index >= 1 && r.sample_index <= k)
    }

    pub fn gold_tables(&self) -> BTreeSet<String> {
        self.golds.iter().flat_map(|g| g.tables.iter().map(|t| t.to_lowercase())).collect()
    }
}

/// Outcome of voting over an item's first k samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotedScore {
    pub score: Score,
    /// Languages present in the winning class.
    pub languages: BTreeSet<Language>,
}

fn as_candidate(r: &RunRecord) -> Candidate {
    let plan_id = format!("s{}", r.sample_index);
    Candidate {
        index: r.sample_index,
        id: format!("c{}", r.sample_index),
        plan: Plan::sampled(plan_id.clone(), "", None),
        program: r.stats.language.map(|language| Program {
            plan_id,
            language,
            source: r.final_sql.clone().unwrap_or_default(),
            attempt: 0,
        }),
        result: r.final_result.clone().map(Ok),
        status: if r.final_result.is_some() { CandidateStatus::Succeeded } else { CandidateStatus::Failed },
        last_verdict: None,
        repair_count: r.stats.repairs,
        max_program_repairs: r.stats.repairs,
        backtrack_count: r.stats.backtracks,
        synth_calls: 0,
        llm_calls: 0,
        tokens: 0,
        tool_counts: Default::default(),
    }
}

/// Votes over the first k samples with the pipeline's rule and scores the
/// winning output.
pub fn vote_item(item: &ItemEvaluation, k: usize, opts: &ScoreOptions) -> VotedScore {
    let candidates: Vec<Candidate> = item.first(k).map(as_candidate).collect();
    let vote = majority_vote(&candidates, opts.tolerance);
    let Some(class) = vote.winner_class() else {
        return VotedScore { score: Score::WRONG, languages: BTreeSet::new() };
    };
    let languages = candidates
        .iter()
        .filter(|c| class.member_indices.contains(&c.index))
        .filter_map(Candidate::language)
        .collect();
    let score = vote.final_result.as_ref().map_or(Score::WRONG, |t| score_result(t, &item.golds, opts));
    VotedScore { score, languages }
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Share of items with a correct sample among their first k.
pub fn pass_at_k(items: &[ItemEvaluation], k: usize) -> f64 {
    fraction(items.iter().filter(|i| i.first(k).any(|r| r.correct)).count(), items.len())
}

/// Share of items whose voted answer over the first k samples is correct.
pub fn majority_at_k(items: &[ItemEvaluation], k: usize, opts: &ScoreOptions) -> f64 {
    fraction(items.iter().filter(|i| vote_item(i, k, opts).score.correct).count(), items.len())
}

/// Mean micro credit of the voted answer over the first k samples.
pub fn micro_at_k(items: &[ItemEvaluation], k: usize, opts: &ScoreOptions) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|i| vote_item(i, k, opts).score.micro_credit).sum::<f64>() / items.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub items: usize,
    pub errored: usize,
    pub pass_at_1: f64,
    pub pass_at_k: f64,
    pub majority_at_k: f64,
    pub micro: f64,
    pub schema_linking: Option<Prf>,
}

/// Solved items (by vote) split by the languages in the winning class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageBreakdown {
    pub only_python: usize,
    pub only_sql: usize,
    pub both: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub k: usize,
    pub overall: DatasetMetrics,
    pub datasets: BTreeMap<String, DatasetMetrics>,
    pub languages: LanguageBreakdown,
    pub tool_totals: BTreeMap<String, u64>,
    pub items: Vec<ItemEvaluation>,
}

fn metrics(items: &[&ItemEvaluation], k: usize, opts: &ScoreOptions) -> DatasetMetrics {
    let owned: Vec<ItemEvaluation> = items.iter().map(|i| (*i).clone()).collect();
    let linked: Vec<Prf> = owned
        .iter()
        .filter(|i| !i.gold_tables().is_empty() && i.error.is_none())
        .map(|i| {
            let gold = i.gold_tables();
            schema_linking_prf(&qualify_against(&i.predicted_tables, &gold), &gold)
        })
        .collect();
    let schema_linking = (!linked.is_empty()).then(|| {
        let n = linked.len() as f64;
        Prf {
            precision: linked.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: linked.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: linked.iter().map(|p| p.f1).sum::<f64>() / n,
        }
    });
    DatasetMetrics {
        items: owned.len(),
        errored: owned.iter().filter(|i| i.error.is_some()).count(),
        pass_at_1: pass_at_k(&owned, 1),
        pass_at_k: pass_at_k(&owned, k),
        majority_at_k: majority_at_k(&owned, k, opts),
        micro: micro_at_k(&owned, k, opts),
        schema_linking,
    }
}

/// Folds item evaluations into per-dataset and overall metrics.
pub fn aggregate_report(items: Vec<ItemEvaluation>, k: usize, opts: &ScoreOptions) -> Report {
    let all: Vec<&ItemEvaluation> = items.iter().collect();
    let mut by_dataset: BTreeMap<String, Vec<&ItemEvaluation>> = BTreeMap::new();
    for i in &items {
        by_dataset.entry(i.dataset.clone()).or_default().push(i);
    }
    let mut languages = LanguageBreakdown::default();
    for i in &items {
        let v = vote_item(i, k, opts);
        if !v.score.correct {
            continue;
        }
        match (v.languages.contains(&Language::Python), v.languages.contains(&Language::Sql)) {
            (true, true) => languages.both += 1,
            (true, false) => languages.only_python += 1,
            _ => languages.only_sql += 1,
        }
    }
    let mut tool_totals = BTreeMap::new();
    for r in items.iter().flat_map(|i| &i.records) {
        for (name, n) in &r.stats.tool_counts {
            *tool_totals.entry(name.clone()).or_insert(0) += n;
        }
    }
    Report {
        k,
        overall: metrics(&all, k, opts),
        datasets: by_dataset.iter().map(|(d, v)| (d.clone(), metrics(v, k, opts))).collect(),
        languages,
        tool_totals,
        items,
    }
}

impl Report {
    /// Fixed-width summary table.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>7} {:>8} {:>8} {:>11} {:>8} {:>8}\n",
            "dataset",
            "items",
            "errored",
            "Pass@1",
            format!("Pass@{}", self.k),
            format!("Majority@{}", self.k),
            "micro",
            "link-F1"
        );
        let mut row = |name: &str, m: &DatasetMetrics| {
            let f1 = m.schema_linking.map_or("-".to_string(), |p| format!("{:.4}", p.f1));
            out.push_str(&format!(
                "{:<16} {:>6} {:>7} {:>8.4} {:>8.4} {:>11.4} {:>8.4} {:>8}\n",
                name, m.items, m.errored, m.pass_at_1, m.pass_at_k, m.majority_at_k, m.micro, f1
            ));
        };
        for (name, m) in &self.datasets {
            row(name, m);
        }
        row("overall", &self.overall);
        out.push_str(&format!(
            "\nsolved by language: only python {}, only sql {}, both {}\n",
            self.languages.only_python, self.languages.only_sql, self.languages.both
        ));
        if !self.tool_totals.is_empty() {
            out.push_str("tool calls:");
            for (name, n) in &self.tool_totals {
                out.push_str(&format!(" {name}={n}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Convenience for tests and fixtures: a one-column integer table.
pub fn int_table(column: &str, values: &[i64]) -> ResultTable {
    ResultTable::new(vec![column.to_string()], values.iter().map(|v| vec![Cell::Integer(*v)]).collect())
}
