//! Python → SQL translation, verified by execution against the consensus.

use thiserror::Error;

use super::parse::parse_program;
use super::trace::{TraceEvent, TraceLog};
use super::{Language, Plan};
use crate::config::PipelineConfig;
use crate::context::PlanningContext;
use crate::db::{results_equivalent, DbHandle, ResultTable};
use crate::llm::{chat, ChatBackend, LlmConfig, Message};
use crate::prompts;

/// One model tier of the translator.
pub struct TranspileTier<'a> {
    pub tier: u8,
    pub backend: &'a dyn ChatBackend,
    pub llm: LlmConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranspileOutcome {
    pub sql: String,
    pub result: ResultTable,
    pub tier: u8,
    /// Attempts across all tiers, including the successful one.
    pub attempts: usize,
    pub llm_calls: usize,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("TranspilationFailed after {attempts} attempts: {last}")]
pub struct TranspileError {
    pub attempts: usize,
    pub llm_calls: usize,
    pub tokens: u64,
    pub last: String,
}

const PREVIEW_ROWS: usize = 20;

/// Tries each tier in order, `attempts_per_tier` times each. An attempt
/// counts only when its SQL executes to a result equivalent (as a multiset)
/// to `consensus`. Failed attempts are fed back within the same tier.
#[allow(clippy::too_many_arguments)]
pub fn transpile_to_sql(
    python_source: &str,
    plan: Option<&Plan>,
    consensus: &ResultTable,
    ctx: &PlanningContext,
    config: &PipelineConfig,
    db: &DbHandle,
    tiers: &[TranspileTier<'_>],
    trace: &TraceLog,
) -> Result<TranspileOutcome, TranspileError> {
    let system = prompts::render(
        prompts::TRANSPILE,
        &[
            ("dialect", prompts::dialect_name(config.dialect)),
            ("rules", &prompts::transpile_rules(config.dialect)),
        ],
    );
    let mut user = format!("{}\nSchema overview:\n{}\n", ctx.header(), ctx.schema_outline());
    if let Some(p) = plan {
        user.push_str(&format!("Plan the program follows:\n{}\n\n", p.render()));
    }
    user.push_str(&format!(
        "Python program:\n```python\n{}\n```\n\nIts output ({} rows):\n{}\n",
        python_source.trim(),
        consensus.row_count(),
        consensus.render_text(PREVIEW_ROWS)
    ));

    let (mut attempts, mut llm_calls, mut tokens) = (0usize, 0usize, 0u64);
    let mut last = String::from("no tier configured");
    for tier in tiers {
        let mut messages = vec![Message::system(system.clone()), Message::user(user.clone())];
        for _ in 0..config.transpile_attempts_per_tier {
            attempts += 1;
            let event = |outcome: &str| {
                TraceEvent::new("transpile", "transpile").detail(format!("tier={} attempt={attempts} {outcome}", tier.tier))
            };
            let reply = match chat(tier.backend, &messages, &[], &tier.llm) {
                Ok(c) => c,
                Err(e) => {
                    last = format!("LLM failure: {e}");
                    trace.push(event(&last));
                    break;
                }
            };
            llm_calls += 1;
            tokens += reply.usage.total_tokens;
            let text = reply.message.content.clone();
            messages.push(Message::assistant(text.clone()));
            let feedback = match parse_program(&text) {
                Some((Language::Sql, sql)) => match db.execute_sql(&sql, config.answer_limits()) {
                    Ok(out) if results_equivalent(&out, consensus, false, config.tolerance) => {
                        trace.push(event("verified").tokens(reply.usage.total_tokens));
                        return Ok(TranspileOutcome { sql, result: out, tier: tier.tier, attempts, llm_calls, tokens });
                    }
                    Ok(out) => format!(
                        "The query ran but its result differs from the Python output. It returned {} rows:\n{}",
                        out.row_count(),
                        out.render_text(PREVIEW_ROWS)
                    ),
                    Err(e) => format!("The query failed: {}", e.message),
                },
                _ => "No SQL query found. Reply with one ```sql fenced block.".to_string(),
            };
            trace.push(event("rejected").tokens(reply.usage.total_tokens));
            last = feedback.clone();
            messages.push(Message::user(format!("{feedback}\nFix the SQL so it returns exactly the Python output.")));
        }
    }
    Err(TranspileError { attempts, llm_calls, tokens, last })
}
