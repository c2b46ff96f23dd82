use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flexsql_core::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "flexsql", version, about = "Text-to-SQL agent: explore, plan, synthesize, vote")]
pub struct Cli {
    /// Log filter, e.g. `info` or `flexsql_core=debug`. Defaults to RUST_LOG or `warn`.
    #[arg(long, global = true)]
    pub log: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one question against one database.
    Run(RunArgs),
    /// Evaluate a JSON-lines manifest and write a report.
    Bench(BenchArgs),
    /// Translate a Python program to SQL, verified against an expected result.
    Transpile(TranspileArgs),
    /// Pretty-print a trace written by `run --trace`.
    InspectTrace(InspectArgs),
    /// Print the effective configuration (file plus flags) as TOML.
    ShowConfig(CommonArgs),
}

/// Settings shared by every pipeline-driving command. Flags override the file.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Attach another database as a schema: NAME=PATH (repeatable).
    #[arg(long, value_name = "NAME=PATH")]
    pub attach: Vec<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub repairs: Option<usize>,
    #[arg(long)]
    pub backtracks: Option<usize>,
    #[arg(long)]
    pub sql_only: bool,
    #[arg(long)]
    pub no_diverse: bool,
    #[arg(long)]
    pub no_repair: bool,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub tier2_model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Replay a scripted conversation instead of calling an endpoint.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Sandbox program speaking the NDJSON protocol (whitespace separated).
    #[arg(long)]
    pub sandbox_cmd: Option<String>,
    /// JSON list of canned sandbox replies, for offline runs.
    #[arg(long)]
    pub sandbox_stub: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub question: Option<String>,
    /// External knowledge document (repeatable).
    #[arg(long)]
    pub doc: Vec<PathBuf>,
    /// Print the full answer as JSON instead of the text summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Items evaluated concurrently.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Accept predictions with extra columns (gold columns matched by name).
    #[arg(long)]
    pub allow_extra_columns: bool,
}

#[derive(Debug, Args)]
pub struct TranspileArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Python program to translate.
    #[arg(long)]
    pub python: PathBuf,
    /// CSV holding the program's output (header row required).
    #[arg(long)]
    pub expected: PathBuf,
    #[arg(long, default_value = "")]
    pub question: String,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub trace: PathBuf,
    /// Only show events of this candidate.
    #[arg(long)]
    pub candidate: Option<String>,
    /// Print details in full instead of their first line.
    #[arg(long)]
    pub full: bool,
}

impl CommonArgs {
    /// Loads the config file (if any) and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let p = &mut cfg.pipeline;
        if let Some(v) = self.k {
            p.k = v;
        }
        if let Some(v) = self.m {
            p.m = v;
        }
        if let Some(v) = self.repairs {
            p.repairs = v;
        }
        if let Some(v) = self.backtracks {
            p.backtracks = v;
        }
        p.sql_only |= self.sql_only;
        p.no_diversity |= self.no_diverse;
        p.no_repair |= self.no_repair;
        if let Some(v) = &self.endpoint {
            p.llm.endpoint = v.clone();
        }
        if let Some(v) = &self.model {
            p.llm.model_id = v.clone();
        }
        if let Some(v) = &self.tier2_model {
            p.tier2_model_id = Some(v.clone());
        }
        if let Some(v) = self.temperature {
            p.llm.temperature = v;
        }
        if let Some(v) = &self.db {
            cfg.db = Some(v.clone());
        }
        for spec in &self.attach {
            let Some((name, path)) = spec.split_once('=') else {
                bail!("--attach expects NAME=PATH, got {spec:?}");
            };
            cfg.attach.insert(name.to_string(), PathBuf::from(path));
        }
        if let Some(v) = &self.script {
            cfg.script = Some(v.clone());
        }
        if let Some(v) = &self.sandbox_cmd {
            cfg.sandbox_command = v.split_whitespace().map(str::to_string).collect();
        }
        if let Some(v) = &self.trace {
            cfg.trace = Some(v.clone());
        }
        if let Some(v) = &self.report {
            cfg.report = Some(v.clone());
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}
