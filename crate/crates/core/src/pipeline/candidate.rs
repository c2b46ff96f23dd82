//! One candidate: synthesize → execute → review → {done | repair | backtrack}.

use std::collections::BTreeMap;

use super::parse::{parse_plans, parse_program, parse_verdict};
use super::planning::vet_plan;
use super::trace::{TraceEvent, TraceLog};
use super::{Candidate, CandidateStatus, Language, Plan, Program, Provenance, ReviewVerdict, VerdictKind};
use crate::config::{Budgets, PipelineConfig};
use crate::context::PlanningContext;
use crate::db::{canonicalize, ExecError, ExecErrorKind, ResultTable};
use crate::llm::{chat, run_tool_loop, ChatBackend, LlmError, LoopOutcome, Message, Transcript};
use crate::prompts;
use crate::sandbox::SandboxStatus;
use crate::tools::{count_by_tool, specs, ToolName, ToolSession, ToolSpec};

/// Rows of a result shown to reviewers.
const PREVIEW_ROWS: usize = 20;

/// What a stage needs: the planning context, the backend, a tool session
/// owned by this candidate (or the planner) and the shared trace.
pub struct CandidateEnv<'a> {
    pub ctx: &'a PlanningContext,
    pub config: &'a PipelineConfig,
    pub backend: &'a dyn ChatBackend,
    pub session: ToolSession,
    pub trace: TraceLog,
    pub llm_calls: usize,
    pub tokens: u64,
}

impl<'a> CandidateEnv<'a> {
    pub fn new(
        ctx: &'a PlanningContext,
        config: &'a PipelineConfig,
        backend: &'a dyn ChatBackend,
        session: ToolSession,
        trace: TraceLog,
    ) -> Self {
        CandidateEnv { ctx, config, backend, session, trace, llm_calls: 0, tokens: 0 }
    }

    pub fn id(&self) -> String {
        self.session.candidate_id().to_string()
    }

    /// Every tool this run allows. PythonExecutor is withheld in SQL-only
    /// runs and when no sandbox is attached.
    pub fn full_tools(&self) -> Vec<ToolSpec> {
        let python = !self.config.sql_only && self.session.has_sandbox();
        specs(&ToolName::ALL.into_iter().filter(|t| *t != ToolName::PythonExecutor || python).collect::<Vec<_>>())
    }

    pub fn exploration_tools(&self) -> Vec<ToolSpec> {
        specs(&[
            ToolName::GetSchema,
            ToolName::GetTableCol,
            ToolName::GetColValues,
            ToolName::FindRows,
            ToolName::SQLExecutor,
        ])
    }

    /// Runs (or continues) a tool loop and books its cost. Returns the
    /// outcome and the tokens spent in this call.
    pub fn run_loop(
        &mut self,
        transcript: &mut Transcript,
        tools: &[ToolSpec],
        phase: &str,
    ) -> Result<(LoopOutcome, u64), LlmError> {
        let calls_before = transcript.chat_calls();
        let tokens_before = transcript.usage().total_tokens;
        let records_before = transcript.tool_records().len();
        let out = run_tool_loop(self.backend, transcript, tools, &mut self.session, &self.config.llm);
        let spent = transcript.usage().total_tokens - tokens_before;
        self.llm_calls += transcript.chat_calls() - calls_before;
        self.tokens += spent;
        let id = self.id();
        for r in &transcript.tool_records()[records_before..] {
            let mut e = TraceEvent::new(&id, phase).digest(r.result_digest.clone());
            e.tool_name = Some(r.tool_name.clone());
            if r.is_error {
                e.detail = Some("error".into());
            }
            self.trace.push(e);
        }
        Ok((out?, spent))
    }

    /// One plain chat call without tools.
    pub fn single_call(&mut self, system: &str, user: String) -> Result<(String, u64), LlmError> {
        let messages = [Message::system(system), Message::user(user)];
        let c = chat(self.backend, &messages, &[], &self.config.llm)?;
        self.llm_calls += 1;
        self.tokens += c.usage.total_tokens;
        Ok((c.message.content, c.usage.total_tokens))
    }

    pub fn event(&self, phase: &str) -> TraceEvent {
        TraceEvent::new(self.session.candidate_id(), phase)
    }

    /// Question, knowledge and schema overview.
    pub fn grounding(&self) -> String {
        format!("{}\nSchema overview:\n{}", self.ctx.header(), self.ctx.schema_outline())
    }
}

fn language_rule(config: &PipelineConfig, hint: Option<Language>) -> String {
    if config.sql_only {
        return "Write the final program in SQL. Python is not available in this run.".into();
    }
    match hint {
        Some(l) => format!("The plan suggests {l}; use whichever of SQL or Python fits the task best."),
        None => "Use whichever of SQL or Python fits the task best.".into(),
    }
}

fn fenced(program: &Program) -> String {
    let tag = match program.language {
        Language::Sql => "sql",
        Language::Python => "python",
    };
    format!("```{tag}\n{}\n```", program.source.trim())
}

fn accept(config: &PipelineConfig, parsed: Option<(Language, String)>) -> Option<(Language, String)> {
    parsed.filter(|(l, _)| !config.sql_only || *l == Language::Sql)
}

/// Generates a program for `plan`. `None` means no usable final program was
/// emitted; the caller treats that as a code-level error.
pub fn synthesize_program(plan: &Plan, env: &mut CandidateEnv<'_>) -> Result<Option<Program>, LlmError> {
    let system = prompts::render(
        prompts::SYNTHESIZE,
        &[
            ("dialect", prompts::dialect_name(env.config.dialect)),
            ("language_rule", &language_rule(env.config, plan.language_hint)),
        ],
    );
    let user = format!("{}\nPlan to implement:\n{}\n", env.grounding(), plan.render());
    let mut transcript = Transcript::new(system, user);
    let tools = env.full_tools();
    let (out, mut tokens) = env.run_loop(&mut transcript, &tools, "synthesize")?;
    let mut parsed = parse_program(&out.final_text);
    if env.config.sql_only && matches!(parsed, Some((Language::Python, _))) {
        transcript.push(Message::user(
            "Python is not allowed in this run. Rewrite the final program as one SQL query in a ```sql block.",
        ));
        let (again, t) = env.run_loop(&mut transcript, &tools, "synthesize")?;
        tokens += t;
        parsed = parse_program(&again.final_text);
    }
    let program = accept(env.config, parsed).map(|(language, source)| Program {
        plan_id: plan.plan_id.clone(),
        language,
        source,
        attempt: 0,
    });
    let detail = match &program {
        Some(p) => format!("{} program for {} rev {}", p.language, plan.plan_id, plan.revision),
        None if out.exhausted => "NoProgramEmitted: step limit reached".into(),
        None => "NoProgramEmitted".into(),
    };
    env.trace.push(env.event("synthesize").tokens(tokens).detail(detail));
    Ok(program)
}

/// Runs a final program. SQL goes to the database with answer limits;
/// Python goes to a freshly reset sandbox session.
pub fn execute_program(program: &Program, env: &mut CandidateEnv<'_>) -> Result<ResultTable, ExecError> {
    let limits = env.config.answer_limits();
    match program.language {
        Language::Sql => env.session.db().execute_sql(&program.source, limits),
        Language::Python => {
            let Some(sandbox) = env.session.sandbox_mut() else {
                return Err(ExecError::runtime("no Python sandbox is configured for this run"));
            };
            let dead = |e: crate::sandbox::SandboxError| ExecError::runtime(e.to_string());
            sandbox.reset().map_err(dead)?;
            let resp = sandbox.exec(&program.source).map_err(dead)?;
            match resp.status {
                SandboxStatus::Timeout => Err(ExecError { kind: ExecErrorKind::Timeout, message: resp.error }),
                SandboxStatus::Error => Err(ExecError::runtime(resp.error)),
                SandboxStatus::Ok => match resp.answer() {
                    Ok(Some(mut t)) => {
                        if t.rows.len() > limits.max_rows {
                            t.row_count_before_truncation = t.rows.len();
                            t.rows.truncate(limits.max_rows);
                            t.truncated = true;
                        }
                        Ok(t)
                    }
                    Ok(None) => Err(ExecError::runtime(
                        "the program declared no answer: assign `answer` or print CSV between <<ANSWER and ANSWER>>",
                    )),
                    Err(e) => Err(ExecError::runtime(format!("answer could not be parsed: {e}"))),
                },
            }
        }
    }
}

/// Classifies an execution. Errors become CODE_ERROR without a model call;
/// an unparseable review fails open to OK.
pub fn review_output(
    plan: &Plan,
    program: &Program,
    result: &Result<ResultTable, ExecError>,
    env: &mut CandidateEnv<'_>,
) -> Result<ReviewVerdict, LlmError> {
    let table = match result {
        Err(e) => {
            let v = ReviewVerdict::new(VerdictKind::CodeError, e.message.clone());
            env.trace.push(env.event("review_output").verdict(v.kind).detail("execution error"));
            return Ok(v);
        }
        Ok(t) => t,
    };
    let user = format!(
        "Question: {}\n\nPlan:\n{}\n\nProgram:\n{}\n\nOutput ({} rows{}):\n{}",
        env.ctx.question,
        plan.render(),
        fenced(program),
        table.row_count(),
        if table.truncated { ", truncated" } else { "" },
        table.render_text(PREVIEW_ROWS)
    );
    let (text, tokens) = env.single_call(prompts::REVIEW_OUTPUT, user)?;
    let verdict = match parse_verdict(&text) {
        Some(v) => v,
        None => {
            tracing::warn!("unparseable output review; treating as OK");
            env.trace.push(env.event("review_output").detail("unparseable review; fail-open OK"));
            ReviewVerdict::ok()
        }
    };
    let mut e = env.event("review_output").verdict(verdict.kind).tokens(tokens);
    if !verdict.message.is_empty() {
        e = e.detail(verdict.message.clone());
    }
    env.trace.push(e);
    Ok(verdict)
}

/// Regenerates a program with the verdict as feedback. The returned program
/// always has `attempt + 1`; `None` inside means nothing usable came back.
pub fn repair_program(
    plan: &Plan,
    previous: Option<&Program>,
    attempt: u32,
    verdict: &ReviewVerdict,
    env: &mut CandidateEnv<'_>,
) -> Result<Option<Program>, LlmError> {
    let system = prompts::render(prompts::REPAIR, &[("language_rule", &language_rule(env.config, plan.language_hint))]);
    let prior = previous.map(fenced).unwrap_or_else(|| "(no program was produced)".into());
    let user = format!(
        "{}\nPlan:\n{}\n\nPrevious program:\n{prior}\n\nError feedback:\n{}\n",
        env.grounding(),
        plan.render(),
        verdict.message
    );
    let mut transcript = Transcript::new(system, user);
    let tools = env.full_tools();
    let (out, tokens) = env.run_loop(&mut transcript, &tools, "repair")?;
    let program = accept(env.config, parse_program(&out.final_text)).map(|(language, source)| Program {
        plan_id: plan.plan_id.clone(),
        language,
        source,
        attempt: attempt + 1,
    });
    let mut e = env.event("repair").tokens(tokens);
    match (&program, previous) {
        (Some(p), Some(prev)) if p.source.trim() == prev.source.trim() => {
            tracing::warn!("repair repeated the previous source verbatim");
            e = e.detail(format!("attempt {}: repeated identical source", attempt + 1));
        }
        (Some(_), _) => e = e.detail(format!("attempt {}", attempt + 1)),
        (None, _) => e = e.detail(format!("attempt {}: NoProgramEmitted", attempt + 1)),
    }
    env.trace.push(e);
    Ok(program)
}

/// Revises a plan after a plan-level rejection.
pub fn backtrack_plan(plan: &Plan, verdict: &ReviewVerdict, env: &mut CandidateEnv<'_>) -> Result<Option<Plan>, LlmError> {
    let user = format!(
        "{}\nRejected plan:\n{}\n\nReviewer feedback:\n{}\n",
        env.grounding(),
        plan.render(),
        verdict.message
    );
    let mut transcript = Transcript::new(prompts::BACKTRACK, user);
    let tools = env.full_tools();
    let (out, tokens) = env.run_loop(&mut transcript, &tools, "backtrack")?;
    let revised = parse_plans(&out.final_text)
        .into_iter()
        .next()
        .map(|(hint, text)| plan.revised(text, hint, Provenance::Backtracked));
    let detail = match &revised {
        Some(p) => format!("{} rev {}", p.plan_id, p.revision),
        None => "no plan block in reply".into(),
    };
    env.trace.push(env.event("backtrack").tokens(tokens).detail(detail));
    Ok(revised)
}

/// Drives one candidate to SUCCEEDED or FAILED. Never errors: model or
/// transport failures end the candidate with the failure as its verdict.
pub fn run_candidate(index: usize, plan: Plan, budgets: Budgets, env: &mut CandidateEnv<'_>) -> Candidate {
    let mut c = Candidate {
        index,
        id: env.id(),
        plan,
        program: None,
        result: None,
        status: CandidateStatus::Failed,
        last_verdict: None,
        repair_count: 0,
        max_program_repairs: 0,
        backtrack_count: 0,
        synth_calls: 0,
        llm_calls: 0,
        tokens: 0,
        tool_counts: BTreeMap::new(),
    };
    if let Err(e) = drive(&mut c, budgets, env) {
        c.status = CandidateStatus::Failed;
        c.last_verdict = Some(ReviewVerdict::new(VerdictKind::CodeError, format!("LLM failure: {e}")));
    }
    c.llm_calls = env.llm_calls;
    c.tokens = env.tokens;
    c.tool_counts = count_by_tool(env.session.records());
    let mut e = env.event("candidate").verdict(match c.status {
        CandidateStatus::Succeeded => "SUCCEEDED",
        CandidateStatus::Failed => "FAILED",
    });
    e = e.detail(format!(
        "repairs={} backtracks={} synth_calls={}",
        c.repair_count, c.backtrack_count, c.synth_calls
    ));
    if let Some(t) = c.table() {
        e = e.digest(canonicalize(t, false, env.config.tolerance).digest);
    }
    env.trace.push(e.tokens(env.tokens));
    c
}

fn drive(c: &mut Candidate, budgets: Budgets, env: &mut CandidateEnv<'_>) -> Result<(), LlmError> {
    if env.config.plan_review {
        c.plan = vet_plan(c.plan.clone(), env)?;
    }
    loop {
        c.synth_calls += 1;
        let mut program = synthesize_program(&c.plan, env)?;
        let mut attempt: u32 = 0;
        loop {
            let verdict = match &program {
                None => {
                    c.result = None;
                    let v = ReviewVerdict::new(VerdictKind::CodeError, "NoProgramEmitted: reply a final program in one fenced ```sql or ```python block");
                    env.trace.push(env.event("review_output").verdict(v.kind).detail("no program"));
                    v
                }
                Some(p) => {
                    let result = execute_program(p, env);
                    let mut e = env.event("execute");
                    e = match &result {
                        Ok(t) => e.digest(canonicalize(t, false, env.config.tolerance).digest).detail(format!("{} rows", t.row_count())),
                        Err(err) => e.detail(format!("{:?}: {}", err.kind, err.message)),
                    };
                    env.trace.push(e);
                    let v = review_output(&c.plan, p, &result, env)?;
                    c.result = Some(result);
                    v
                }
            };
            if program.is_some() {
                c.program = program.clone();
            }
            c.last_verdict = Some(verdict.clone());
            match verdict.kind {
                VerdictKind::Ok => {
                    c.status = CandidateStatus::Succeeded;
                    return Ok(());
                }
                VerdictKind::CodeError if (attempt as usize) < budgets.repairs => {
                    let next = repair_program(&c.plan, program.as_ref(), attempt, &verdict, env)?;
                    attempt += 1;
                    c.repair_count += 1;
                    c.synth_calls += 1;
                    c.max_program_repairs = c.max_program_repairs.max(attempt);
                    program = next;
                }
                VerdictKind::PlanError if (c.backtrack_count as usize) < budgets.backtracks => {
                    match backtrack_plan(&c.plan, &verdict, env)? {
                        Some(p) => {
                            c.plan = p;
                            c.backtrack_count += 1;
                            break;
                        }
                        None => {
                            c.status = CandidateStatus::Failed;
                            return Ok(());
                        }
                    }
                }
                _ => {
                    c.status = CandidateStatus::Failed;
                    return Ok(());
                }
            }
        }
    }
}
