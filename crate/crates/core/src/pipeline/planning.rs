//! Plan sampling in batches, plan review and refinement.

use super::candidate::CandidateEnv;
use super::parse::{parse_plan_review, parse_plans};
use super::{Language, Plan, Provenance};
use crate::llm::{LlmError, Message, Transcript};
use crate::prompts;

/// Used only when a batch yields no parseable plan at all.
const GENERIC_PLAN: &str = "Inspect the relevant tables, locate the columns the question refers to, \
check the stored filter values, then answer with a single query over those tables.";

fn prior_section(plans: &[Plan]) -> String {
    let mut s = format!("{}\n", prompts::PRIOR_PLANS_HEADER);
    if plans.is_empty() {
        s.push_str("(none yet)\n");
    } else {
        for p in plans {
            s.push_str(&format!("{}:\n{}\n", p.plan_id, p.render()));
        }
    }
    s.push_str(
        "Every new plan must take a different approach from each plan listed above: other tables, \
other joins, other filters or another reading of the question.\n",
    );
    s
}

fn batch_prompt(env: &CandidateEnv<'_>, n: usize, prior: Option<&[Plan]>) -> String {
    let mut s = env.grounding();
    s.push_str(&format!(
        "\nWrite exactly {n} plan{} for this question, each in its own <plan> block.\n",
        if n == 1 { "" } else { "s" }
    ));
    if env.config.sql_only {
        s.push_str("Programs in this run must be SQL, so use language=\"SQL\" for every plan.\n");
    }
    if let Some(prior) = prior {
        s.push('\n');
        s.push_str(&prior_section(prior));
    }
    s
}

/// Samples `k` plans in ⌈k/m⌉ batches. With diversity on, each batch sees
/// every plan generated before it. A short batch is re-asked once; what is
/// still missing is filled by cycling the batch's own plans.
pub fn generate_plans(env: &mut CandidateEnv<'_>, k: usize, m: usize, diversity: bool) -> Result<Vec<Plan>, LlmError> {
    let m = m.clamp(1, k.max(1));
    let mut plans: Vec<Plan> = Vec::new();
    let tools = env.full_tools();
    let mut batch_no = 0;
    while plans.len() < k {
        batch_no += 1;
        let n = m.min(k - plans.len());
        let user = batch_prompt(env, n, diversity.then_some(plans.as_slice()));
        let system = prompts::render(prompts::PLAN, &[("dialect", prompts::dialect_name(env.config.dialect))]);
        let mut transcript = Transcript::new(system, user.clone());
        let (out, mut tokens) = env.run_loop(&mut transcript, &tools, "plan_batch")?;
        let mut found = parse_plans(&out.final_text);
        let mut retried = false;
        if found.len() < n {
            retried = true;
            transcript.push(Message::user(format!(
                "Only {} complete <plan> block(s) were found; {n} are required. Write the missing {} plan(s), \
each in its own <plan> block.",
                found.len(),
                n - found.len()
            )));
            let (again, t) = env.run_loop(&mut transcript, &tools, "plan_batch")?;
            tokens += t;
            found.extend(parse_plans(&again.final_text));
        }
        found.truncate(n);
        let parsed = found.len();
        if found.is_empty() {
            found.push((None, GENERIC_PLAN.to_string()));
        }
        let mut batch: Vec<Plan> = Vec::with_capacity(n);
        for i in 0..n {
            let (hint, text) = found[i % found.len()].clone();
            let hint = if env.config.sql_only { Some(Language::Sql) } else { hint };
            let mut p = Plan::sampled(format!("p{}", plans.len() + i + 1), text, hint);
            if i >= parsed {
                p.warnings.push("padded: batch returned too few plans".into());
            }
            batch.push(p);
        }
        let detail = format!("batch={batch_no} requested={n} parsed={parsed} retried={retried}\n{user}");
        env.trace.push(env.event("plan_batch").tokens(tokens).detail(detail));
        plans.extend(batch);
    }
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanReview {
    /// `None` when the plan passed.
    pub issues: Option<String>,
    /// True when the reply could not be parsed and the plan was let through.
    pub fail_open: bool,
}

/// Checks a plan against the database with the exploration tools.
pub fn review_plan(plan: &Plan, env: &mut CandidateEnv<'_>) -> Result<PlanReview, LlmError> {
    let user = format!("{}\nPlan under review:\n{}\n", env.grounding(), plan.render());
    let mut transcript = Transcript::new(prompts::PLAN_REVIEW, user);
    let tools = env.exploration_tools();
    let (out, tokens) = env.run_loop(&mut transcript, &tools, "plan_review")?;
    let review = match parse_plan_review(&out.final_text) {
        Some(issues) => PlanReview { issues, fail_open: false },
        None => PlanReview { issues: None, fail_open: true },
    };
    let verdict = if review.issues.is_some() { "REVISE" } else { "OK" };
    let mut e = env.event("plan_review").tokens(tokens).verdict(verdict);
    if let Some(i) = &review.issues {
        e = e.detail(i.clone());
    } else if review.fail_open {
        e = e.detail("unparseable review; fail-open OK");
    }
    env.trace.push(e);
    Ok(review)
}

/// Rewrites a plan flagged by review. Returns the plan unchanged when the
/// reply holds no plan block.
pub fn refine_plan(plan: &Plan, issues: &str, env: &mut CandidateEnv<'_>) -> Result<Plan, LlmError> {
    let user = format!(
        "{}\nPlan that failed review:\n{}\n\nProblems found:\n{issues}\n",
        env.grounding(),
        plan.render()
    );
    let mut transcript = Transcript::new(prompts::PLAN_REFINE, user);
    let tools = env.full_tools();
    let (out, tokens) = env.run_loop(&mut transcript, &tools, "plan_refine")?;
    let refined = parse_plans(&out.final_text)
        .into_iter()
        .next()
        .map(|(hint, text)| plan.revised(text, hint, Provenance::Refined));
    let detail = match &refined {
        Some(p) => format!("{} rev {}", p.plan_id, p.revision),
        None => "no plan block in reply; keeping previous plan".into(),
    };
    env.trace.push(env.event("plan_refine").tokens(tokens).detail(detail));
    Ok(refined.unwrap_or_else(|| plan.clone()))
}

/// Review, then up to `refine_rounds` refine-and-re-review rounds. A plan
/// still flagged afterwards is passed on with a warning.
pub(crate) fn vet_plan(mut plan: Plan, env: &mut CandidateEnv<'_>) -> Result<Plan, LlmError> {
    let mut review = review_plan(&plan, env)?;
    for _ in 0..env.config.refine_rounds {
        let Some(issues) = review.issues.clone() else {
            return Ok(plan);
        };
        plan = refine_plan(&plan, &issues, env)?;
        review = review_plan(&plan, env)?;
    }
    if let Some(issues) = review.issues {
        tracing::warn!("plan {} still flagged after refinement", plan.plan_id);
        plan.warnings.push(format!("unresolved review issue: {issues}"));
    }
    Ok(plan)
}
