//! End-to-end question answering.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::candidate::{run_candidate, CandidateEnv};
use super::planning::generate_plans;
use super::trace::{TraceEvent, TraceLog};
use super::transpile::{transpile_to_sql, TranspileTier};
use super::vote::{majority_vote, representative, sql_member, EquivalenceClass, VoteOutcome};
use super::{candidate_id, Candidate, CandidateStatus, Language, Plan, ReviewVerdict, Runtime};
use crate::config::PipelineConfig;
use crate::context::{route_schemas, summarize_documents, Document, PlanningContext, SchemaView};
use crate::db::{canonicalize, results_equivalent, Cell, DbHandle, ResultTable};
use crate::sandbox::SandboxSession;
use crate::tools::ToolSession;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AnswerStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub id: String,
    pub plan_id: String,
    pub plan_revision: u32,
    pub status: CandidateStatus,
    pub language: Option<Language>,
    pub repairs: u32,
    pub backtracks: u32,
    pub synth_calls: u32,
    pub digest: Option<String>,
    pub last_verdict: Option<ReviewVerdict>,
    pub tool_calls: BTreeMap<String, u64>,
}

/// Run bookkeeping. Contains no wall-clock values, so replayed runs
/// serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunStats {
    pub llm_calls: usize,
    pub tokens: u64,
    pub tool_calls: BTreeMap<String, u64>,
    pub relevant_schemas: Vec<String>,
    pub routing_fell_back: bool,
    pub knowledge_chars: usize,
    pub plans: Vec<Plan>,
    pub candidates: Vec<CandidateSummary>,
    pub transpiled: bool,
    pub transpile_tier: Option<u8>,
    pub transpile_attempts: usize,
    /// Digest of the original Python-only winner when the answer fell back.
    pub fallback_from: Option<String>,
    /// Result of re-executing the final SQL once more.
    pub final_check: Option<bool>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub status: AnswerStatus,
    pub final_sql: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub classes: Vec<EquivalenceClass>,
    pub stats: RunStats,
    pub failure: Option<String>,
    #[serde(skip)]
    pub final_result: Option<ResultTable>,
    #[serde(skip)]
    pub vote: Option<VoteOutcome>,
    #[serde(skip)]
    pub candidates: Vec<Candidate>,
    #[serde(skip)]
    pub trace: TraceLog,
}

impl FinalAnswer {
    fn failed(message: String, stats: RunStats, trace: TraceLog) -> FinalAnswer {
        trace.push(TraceEvent::new("run", "answer").verdict("FAILED").detail(message.clone()));
        FinalAnswer {
            status: AnswerStatus::Failed,
            final_sql: None,
            columns: vec![],
            rows: vec![],
            classes: vec![],
            stats,
            failure: Some(message),
            final_result: None,
            vote: None,
            candidates: vec![],
            trace,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == AnswerStatus::Succeeded
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("final answer serializes")
    }

    /// Languages of the winning class's members.
    pub fn winner_languages(&self) -> Vec<Language> {
        let Some(class) = self.vote.as_ref().and_then(|v| v.winner_class()) else {
            return vec![];
        };
        self.candidates
            .iter()
            .filter(|c| class.member_indices.contains(&c.index))
            .filter_map(|c| c.language())
            .collect()
    }
}

fn start_sandbox(runtime: &Runtime, config: &PipelineConfig, db: &DbHandle, trace: &TraceLog, who: &str) -> Option<Box<dyn SandboxSession>> {
    if config.sql_only {
        return None;
    }
    let factory = runtime.sandbox.as_ref()?;
    match factory.start(db.location()) {
        Ok(s) => Some(s),
        Err(e) => {
            tracing::warn!("sandbox for {who} unavailable: {e}");
            trace.push(TraceEvent::new(who, "sandbox").detail(format!("unavailable: {e}")));
            None
        }
    }
}

fn session(
    who: &str,
    view: &Arc<SchemaView>,
    db: &DbHandle,
    runtime: &Runtime,
    config: &PipelineConfig,
    trace: &TraceLog,
) -> Result<ToolSession, String> {
    let handle = db.reopen().map_err(|e| format!("cannot open database for {who}: {e}"))?;
    let sandbox = start_sandbox(runtime, config, db, trace, who);
    Ok(ToolSession::new(who, view.clone(), handle, sandbox, config.tools))
}

/// Answers one question. Never returns an error: every failure ends in a
/// FAILED answer with the reason attached and recorded in the trace.
pub fn answer_question(
    question: &str,
    db: &DbHandle,
    docs: &[Document],
    config: &PipelineConfig,
    runtime: &Runtime,
) -> FinalAnswer {
    let trace = TraceLog::default();
    let mut stats = RunStats::default();
    if let Err(e) = config.validate() {
        return FinalAnswer::failed(e.to_string(), stats, trace);
    }
    let raw = match db.snapshot_hierarchy() {
        Ok(s) => s,
        Err(e) => return FinalAnswer::failed(format!("schema introspection failed: {e}"), stats, trace),
    };
    let view = Arc::new(SchemaView::with_patterns(&raw, &config.suffix_patterns));

    let mut planner = match session("planner", &view, db, runtime, config, &trace) {
        Ok(s) => s,
        Err(e) => return FinalAnswer::failed(e, stats, trace),
    };
    let backend = runtime.backend.as_ref();

    let summary = match summarize_documents(docs, question, backend, &config.llm, config.summary_max_chars) {
        Ok(s) => s,
        Err(e) => return FinalAnswer::failed(e.to_string(), stats, trace),
    };
    stats.llm_calls += summary.llm_calls;
    stats.knowledge_chars = summary.text.chars().count();
    if summary.llm_calls > 0 {
        let detail = if summary.clipped { "clipped to cap" } else { "ok" };
        trace.push(TraceEvent::new("planner", "summarize").detail(detail));
    }

    let route = match route_schemas(question, backend, &config.llm, &mut planner) {
        Ok(r) => r,
        Err(e) => return FinalAnswer::failed(e.to_string(), stats, trace),
    };
    stats.llm_calls += route.llm_calls;
    if let Some(t) = &route.transcript {
        stats.tokens += t.usage().total_tokens;
        for r in t.tool_records() {
            let mut e = TraceEvent::new("planner", "route").digest(r.result_digest.clone());
            e.tool_name = Some(r.tool_name.clone());
            trace.push(e);
        }
    }
    trace.push(
        TraceEvent::new("planner", "route")
            .detail(format!("{} (fallback: {})", route.schemas.join(", "), route.fell_back)),
    );
    stats.relevant_schemas = route.schemas.clone();
    stats.routing_fell_back = route.fell_back;

    let ctx = PlanningContext {
        question: question.to_string(),
        knowledge_summary: summary.text,
        view: view.clone(),
        relevant_schemas: route.schemas,
        dialect: config.dialect,
    };
    if let Err(e) = ctx.validate() {
        return FinalAnswer::failed(e, stats, trace);
    }

    let mut planner_env = CandidateEnv::new(&ctx, config, backend, planner, trace.clone());
    let plans = match generate_plans(&mut planner_env, config.k, config.batch_size(), config.diversity()) {
        Ok(p) => p,
        Err(e) => return FinalAnswer::failed(format!("plan generation failed: {e}"), stats, trace),
    };
    stats.llm_calls += planner_env.llm_calls;
    stats.tokens += planner_env.tokens;
    for r in planner_env.session.records() {
        *stats.tool_calls.entry(r.tool_name.clone()).or_insert(0) += 1;
    }
    stats.plans = plans.clone();

    let candidates = run_all(&plans, &ctx, config, runtime, db, &view, &trace);
    for c in &candidates {
        stats.llm_calls += c.llm_calls;
        stats.tokens += c.tokens;
        for (k, v) in &c.tool_counts {
            *stats.tool_calls.entry(k.clone()).or_insert(0) += v;
        }
        stats.candidates.push(CandidateSummary {
            id: c.id.clone(),
            plan_id: c.plan.plan_id.clone(),
            plan_revision: c.plan.revision,
            status: c.status,
            language: c.language(),
            repairs: c.repair_count,
            backtracks: c.backtrack_count,
            synth_calls: c.synth_calls,
            digest: c.table().map(|t| canonicalize(t, false, config.tolerance).digest),
            last_verdict: c.last_verdict.clone(),
            tool_calls: c.tool_counts.clone(),
        });
    }

    let mut vote = majority_vote(&candidates, config.tolerance);
    let sizes: Vec<String> = vote.classes.iter().map(|c| format!("{}:{}", &c.digest[..12.min(c.digest.len())], c.size)).collect();
    let mut ve = TraceEvent::new("run", "vote").detail(format!("classes [{}]", sizes.join(", ")));
    if let Some(w) = vote.winner_class() {
        ve = ve.digest(w.digest.clone());
    }
    trace.push(ve);

    let mut failure = None;
    if vote.winner.is_none() {
        failure = Some("no candidate succeeded".to_string());
    } else if vote.needs_transpile() {
        failure = resolve_python_winner(&mut vote, &candidates, &ctx, config, runtime, db, &trace, &mut stats);
    }

    if failure.is_none() {
        if let (Some(sql), Some(expected)) = (&vote.final_sql, &vote.final_result) {
            let check = db.execute_sql(sql, config.answer_limits());
            let ok = match &check {
                Ok(t) => results_equivalent(t, expected, false, config.tolerance),
                Err(_) => false,
            };
            stats.final_check = Some(ok);
            if !ok {
                stats.warnings.push("final SQL did not reproduce the voted result on re-execution".into());
            }
        }
    }

    let status = if failure.is_none() && vote.final_sql.is_some() { AnswerStatus::Succeeded } else { AnswerStatus::Failed };
    let final_result = if status == AnswerStatus::Succeeded { vote.final_result.clone() } else { None };
    let (columns, rows) = match &final_result {
        Some(t) => (t.column_names.clone(), t.rows.iter().map(|r| r.iter().map(Cell::to_json).collect()).collect()),
        None => (vec![], vec![]),
    };
    let mut fe = TraceEvent::new("run", "answer").verdict(match status {
        AnswerStatus::Succeeded => "SUCCEEDED",
        AnswerStatus::Failed => "FAILED",
    });
    if let Some(f) = &failure {
        fe = fe.detail(f.clone());
    }
    trace.push(fe.tokens(stats.tokens));
    FinalAnswer {
        status,
        final_sql: if status == AnswerStatus::Succeeded { vote.final_sql.clone() } else { None },
        columns,
        rows,
        classes: vote.classes.clone(),
        stats,
        failure,
        final_result,
        vote: Some(vote),
        candidates,
        trace,
    }
}

/// Transpiles a Python-only winner, or falls back to the best class with a
/// SQL member. Returns the failure message when neither works.
#[allow(clippy::too_many_arguments)]
fn resolve_python_winner(
    vote: &mut VoteOutcome,
    candidates: &[Candidate],
    ctx: &PlanningContext,
    config: &PipelineConfig,
    runtime: &Runtime,
    db: &DbHandle,
    trace: &TraceLog,
    stats: &mut RunStats,
) -> Option<String> {
    let winner = vote.winner_class().cloned().expect("winner present");
    let py = representative(candidates, &winner, Some(Language::Python)).expect("python-only class has a python member");
    let source = py.program.as_ref().map(|p| p.source.clone()).unwrap_or_default();
    let consensus = py.table().cloned().expect("winner member has a result");
    let tier2_backend = runtime.tier2.as_deref().unwrap_or(runtime.backend.as_ref());
    let tiers = [
        TranspileTier { tier: 1, backend: runtime.backend.as_ref(), llm: config.llm.clone() },
        TranspileTier { tier: 2, backend: tier2_backend, llm: config.tier2_llm() },
    ];
    match transpile_to_sql(&source, Some(&py.plan), &consensus, ctx, config, db, &tiers, trace) {
        Ok(out) => {
            stats.llm_calls += out.llm_calls;
            stats.tokens += out.tokens;
            stats.transpiled = true;
            stats.transpile_tier = Some(out.tier);
            stats.transpile_attempts = out.attempts;
            vote.final_sql = Some(out.sql);
            vote.final_result = Some(out.result);
            vote.transpiled = true;
            None
        }
        Err(err) => {
            stats.llm_calls += err.llm_calls;
            stats.tokens += err.tokens;
            stats.transpile_attempts = err.attempts;
            match vote.fallback_class() {
                Some(fb) => {
                    let class = &vote.classes[fb];
                    trace.push(
                        TraceEvent::new("run", "fallback")
                            .digest(class.digest.clone())
                            .detail(format!("{err}; using class of {}", class.members.join(","))),
                    );
                    stats.warnings.push(format!("{err}; fell back to the largest class with a SQL member"));
                    stats.fallback_from = Some(winner.digest.clone());
                    let sql_cand = representative(candidates, class, Some(Language::Sql));
                    vote.final_sql = sql_member(candidates, class);
                    vote.final_result = sql_cand.and_then(|c| c.table().cloned());
                    vote.fallback_from = vote.winner;
                    vote.winner = Some(fb);
                    None
                }
                None => {
                    trace.push(TraceEvent::new("run", "fallback").detail("no class with a SQL member"));
                    vote.final_sql = None;
                    Some(err.to_string())
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    index: usize,
    plan: &Plan,
    ctx: &PlanningContext,
    config: &PipelineConfig,
    runtime: &Runtime,
    db: &DbHandle,
    view: &Arc<SchemaView>,
    trace: &TraceLog,
) -> Candidate {
    let id = candidate_id(index);
    match session(&id, view, db, runtime, config, trace) {
        Ok(s) => {
            let mut env = CandidateEnv::new(ctx, config, runtime.backend.as_ref(), s, trace.clone());
            run_candidate(index, plan.clone(), config.budgets(), &mut env)
        }
        Err(e) => failed_candidate(index, plan, e),
    }
}

fn failed_candidate(index: usize, plan: &Plan, message: String) -> Candidate {
    Candidate {
        index,
        id: candidate_id(index),
        plan: plan.clone(),
        program: None,
        result: None,
        status: CandidateStatus::Failed,
        last_verdict: Some(ReviewVerdict::new(super::VerdictKind::CodeError, message)),
        repair_count: 0,
        max_program_repairs: 0,
        backtrack_count: 0,
        synth_calls: 0,
        llm_calls: 0,
        tokens: 0,
        tool_counts: BTreeMap::new(),
    }
}

/// Runs every candidate, concurrently unless a replay backend demands order.
fn run_all(
    plans: &[Plan],
    ctx: &PlanningContext,
    config: &PipelineConfig,
    runtime: &Runtime,
    db: &DbHandle,
    view: &Arc<SchemaView>,
    trace: &TraceLog,
) -> Vec<Candidate> {
    let workers = if runtime.sequential() { 1 } else { config.parallelism.min(plans.len()).max(1) };
    if workers == 1 {
        return plans
            .iter()
            .enumerate()
            .map(|(i, p)| run_one(i + 1, p, ctx, config, runtime, db, view, trace))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Candidate>> = Mutex::new(Vec::with_capacity(plans.len()));
    // each worker opens its own handle; `DbHandle` itself stays on this thread
    let location = db.location().to_path_buf();
    let dialect = db.dialect();
    let attached = db.attached().to_vec();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let local = crate::db::open_database(&location, dialect, true).and_then(|mut h| {
                    for (name, path) in &attached {
                        h.attach(name, path)?;
                    }
                    Ok(h)
                });
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= plans.len() {
                        break;
                    }
                    let c = match &local {
                        Ok(h) => run_one(i + 1, &plans[i], ctx, config, runtime, h, view, trace),
                        Err(e) => failed_candidate(i + 1, &plans[i], format!("cannot open database: {e}")),
                    };
                    done.lock().expect("results poisoned").push(c);
                }
            });
        }
    });
    let mut out = done.into_inner().expect("results poisoned");
    out.sort_by_key(|c| c.index);
    out
}
