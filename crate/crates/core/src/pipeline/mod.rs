//! Plan generation, candidate synthesis with repair and backtracking,
//! output-equivalence voting and verified transpilation.

mod answer;
mod candidate;
pub mod parse;
mod planning;
mod trace;
mod transpile;
mod vote;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::db::{ExecError, ResultTable};
use crate::llm::ChatBackend;
use crate::sandbox::SandboxFactory;

pub use answer::{answer_question, AnswerStatus, CandidateSummary, FinalAnswer, RunStats};
pub use candidate::{
    backtrack_plan, execute_program, repair_program, review_output, run_candidate, synthesize_program, CandidateEnv,
};
pub use planning::{generate_plans, refine_plan, review_plan, PlanReview};
pub use trace::{read_jsonl, TraceEvent, TraceLog};
pub use transpile::{transpile_to_sql, TranspileError, TranspileOutcome, TranspileTier};
pub use vote::{majority_vote, EquivalenceClass, VoteOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Language {
    Sql,
    Python,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Sql => "SQL",
            Language::Python => "PYTHON",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    Sampled,
    Refined,
    Backtracked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: String,
    pub narrative: String,
    pub language_hint: Option<Language>,
    pub revision: u32,
    pub provenance: Provenance,
    /// Set when a plan was passed on despite an unresolved review issue, or padded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Plan {
    pub fn sampled(plan_id: impl Into<String>, narrative: impl Into<String>, language_hint: Option<Language>) -> Plan {
        Plan {
            plan_id: plan_id.into(),
            narrative: narrative.into(),
            language_hint,
            revision: 0,
            provenance: Provenance::Sampled,
            warnings: Vec::new(),
        }
    }

    /// The next revision of this plan with new text.
    pub fn revised(&self, narrative: String, language_hint: Option<Language>, provenance: Provenance) -> Plan {
        Plan {
            plan_id: self.plan_id.clone(),
            narrative,
            language_hint: language_hint.or(self.language_hint),
            revision: self.revision + 1,
            provenance,
            warnings: Vec::new(),
        }
    }

    /// Text block used inside prompts.
    pub fn render(&self) -> String {
        let lang = self.language_hint.map(|l| l.to_string()).unwrap_or_else(|| "ANY".into());
        format!("<plan language=\"{lang}\">\n{}\n</plan>", self.narrative.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub plan_id: String,
    pub language: Language,
    pub source: String,
    /// 0 for the first synthesis, +1 per repair.
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictKind {
    Ok,
    CodeError,
    PlanError,
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictKind::Ok => "OK",
            VerdictKind::CodeError => "CODE_ERROR",
            VerdictKind::PlanError => "PLAN_ERROR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub kind: VerdictKind,
    pub message: String,
}

impl ReviewVerdict {
    pub fn ok() -> Self {
        ReviewVerdict { kind: VerdictKind::Ok, message: String::new() }
    }

    /// Non-OK verdicts always carry a message.
    pub fn new(kind: VerdictKind, message: impl Into<String>) -> Self {
        let mut message = message.into();
        if kind != VerdictKind::Ok && message.trim().is_empty() {
            message = "(no reason given)".into();
        }
        ReviewVerdict { kind, message }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CandidateStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    /// Position among the K candidates, starting at 1. Drives tie-breaks.
    pub index: usize,
    pub id: String,
    pub plan: Plan,
    pub program: Option<Program>,
    pub result: Option<Result<ResultTable, ExecError>>,
    pub status: CandidateStatus,
    pub last_verdict: Option<ReviewVerdict>,
    /// Repairs across all plan versions.
    pub repair_count: u32,
    /// Highest repair count reached by any single program.
    pub max_program_repairs: u32,
    pub backtrack_count: u32,
    /// Synthesis plus repair calls.
    pub synth_calls: u32,
    pub llm_calls: usize,
    pub tokens: u64,
    pub tool_counts: std::collections::BTreeMap<String, u64>,
}

impl Candidate {
    pub fn language(&self) -> Option<Language> {
        self.program.as_ref().map(|p| p.language)
    }

    pub fn table(&self) -> Option<&ResultTable> {
        match &self.result {
            Some(Ok(t)) if self.status == CandidateStatus::Succeeded => Some(t),
            _ => None,
        }
    }
}

pub fn candidate_id(index: usize) -> String {
    format!("c{index}")
}

/// Backends and sandbox shared by every stage of one run.
#[derive(Clone)]
pub struct Runtime {
    pub backend: Arc<dyn ChatBackend>,
    /// Second-tier transpiler; falls back to `backend` with the tier-2 model id.
    pub tier2: Option<Arc<dyn ChatBackend>>,
    pub sandbox: Option<Arc<dyn SandboxFactory>>,
}

impl Runtime {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Runtime {
        Runtime { backend, tier2: None, sandbox: None }
    }

    pub fn with_sandbox(mut self, factory: Arc<dyn SandboxFactory>) -> Runtime {
        self.sandbox = Some(factory);
        self
    }

    pub fn with_tier2(mut self, backend: Arc<dyn ChatBackend>) -> Runtime {
        self.tier2 = Some(backend);
        self
    }

    fn sequential(&self) -> bool {
        self.backend.requires_sequential() || self.tier2.as_ref().is_some_and(|b| b.requires_sequential())
    }
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("tier2", &self.tier2.is_some())
            .field("sandbox", &self.sandbox.is_some())
            .finish()
    }
}
