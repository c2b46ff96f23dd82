//! Run configuration. Loaded from TOML; CLI flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::SuffixPattern;
use crate::db::{Dialect, ExecLimits, NumTolerance};
use crate::llm::LlmConfig;
use crate::sandbox::SandboxLimits;
use crate::tools::ToolLimits;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Effective repair/backtrack budgets after ablation flags are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budgets {
    pub repairs: usize,
    pub backtracks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Plans (and candidates) per question.
    pub k: usize,
    /// Plans per batch.
    pub m: usize,
    /// Repair rounds per program (R).
    pub repairs: usize,
    /// Plan backtracks per candidate (B).
    pub backtracks: usize,
    pub sql_only: bool,
    pub no_diversity: bool,
    /// Disables repair and backtracking together.
    pub no_repair: bool,
    /// Review each plan before synthesis.
    pub plan_review: bool,
    pub refine_rounds: usize,
    /// Concurrent candidates; replay backends force 1.
    pub parallelism: usize,
    pub transpile_attempts_per_tier: usize,
    pub dialect: Dialect,
    pub llm: LlmConfig,
    /// Model used for the second transpilation tier; defaults to `llm.model_id`.
    pub tier2_model_id: Option<String>,
    pub tools: ToolLimits,
    pub sandbox: SandboxLimits,
    pub answer_max_rows: usize,
    pub answer_timeout_s: u64,
    pub summary_max_chars: usize,
    pub tolerance: NumTolerance,
    pub suffix_patterns: Vec<SuffixPattern>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 8,
            m: 4,
            repairs: 3,
            backtracks: 1,
            sql_only: false,
            no_diversity: false,
            no_repair: false,
            plan_review: true,
            refine_rounds: 1,
            parallelism: 4,
            transpile_attempts_per_tier: 2,
            dialect: Dialect::Sqlite,
            llm: LlmConfig::default(),
            tier2_model_id: None,
            tools: ToolLimits::default(),
            sandbox: SandboxLimits::default(),
            answer_max_rows: 10_000,
            answer_timeout_s: 60,
            summary_max_chars: 4000,
            tolerance: NumTolerance::default(),
            suffix_patterns: SuffixPattern::defaults(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.m < 1 {
            return bad("m must be at least 1");
        }
        if self.parallelism < 1 {
            return bad("parallelism must be at least 1");
        }
        if self.transpile_attempts_per_tier < 1 {
            return bad("transpile_attempts_per_tier must be at least 1");
        }
        if !(self.tolerance.relative >= 0.0 && self.tolerance.absolute_floor >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        self.llm.validate().map_err(ConfigError::Invalid)
    }

    pub fn budgets(&self) -> Budgets {
        if self.no_repair {
            Budgets { repairs: 0, backtracks: 0 }
        } else {
            Budgets { repairs: self.repairs, backtracks: self.backtracks }
        }
    }

    /// Batch size, never larger than K.
    pub fn batch_size(&self) -> usize {
        self.m.clamp(1, self.k.max(1))
    }

    pub fn diversity(&self) -> bool {
        !self.no_diversity
    }

    pub fn answer_limits(&self) -> ExecLimits {
        ExecLimits { max_rows: self.answer_max_rows, timeout: std::time::Duration::from_secs(self.answer_timeout_s) }
    }

    pub fn tier2_llm(&self) -> LlmConfig {
        let mut c = self.llm.clone();
        if let Some(m) = &self.tier2_model_id {
            c.model_id = m.clone();
        }
        c
    }
}

/// Everything one CLI invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub db: Option<PathBuf>,
    /// Extra databases attached as named schemas: `name = "path"`.
    pub attach: std::collections::BTreeMap<String, PathBuf>,
    pub question: Option<String>,
    pub docs: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Replay fixture used instead of the HTTP backend.
    pub script: Option<PathBuf>,
    /// Command that starts a Python sandbox speaking the NDJSON protocol.
    pub sandbox_command: Vec<String>,
    pub seed_label: Option<String>,
    /// Items evaluated concurrently by the bench harness.
    pub bench_workers: usize,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always TOML-serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline.validate()
    }

    pub fn workers(&self) -> usize {
        self.bench_workers.max(1)
    }
}
