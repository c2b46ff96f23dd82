use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use flexsql_core::config::RunConfig;
use flexsql_core::context::{Document, PlanningContext, SchemaView};
use flexsql_core::db::{open_database, DbHandle};
use flexsql_core::eval::{load_manifest, run_benchmark, BenchOptions, BenchmarkItem, ScoreOptions};
use flexsql_core::llm::{load_script, ChatBackend, HttpBackend};
use flexsql_core::pipeline::{answer_question, read_jsonl, transpile_to_sql, Runtime, TraceLog, TranspileTier};
use flexsql_core::sandbox::{ProcessSandboxFactory, SandboxFactory, StubRule, StubSandbox};
use flexsql_core::table_csv;

use crate::args::{BenchArgs, CommonArgs, InspectArgs, RunArgs, TranspileArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 2;

const PREVIEW_ROWS: usize = 20;

fn backend(cfg: &RunConfig, script: Option<&Path>) -> Result<Arc<dyn ChatBackend>> {
    Ok(match script {
        Some(p) => Arc::new(load_script(p).with_context(|| format!("loading script {}", p.display()))?),
        None => Arc::new(HttpBackend::from_env(&cfg.pipeline.llm)),
    })
}

fn sandbox(cfg: &RunConfig, common: &CommonArgs) -> Result<Option<Arc<dyn SandboxFactory>>> {
    if let Some(p) = &common.sandbox_stub {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rules: Vec<StubRule> = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        return Ok(Some(Arc::new(StubSandbox::new(rules))));
    }
    if cfg.sandbox_command.is_empty() {
        return Ok(None);
    }
    Ok(Some(Arc::new(ProcessSandboxFactory::new(cfg.sandbox_command.clone(), cfg.pipeline.sandbox))))
}

fn runtime(cfg: &RunConfig, common: &CommonArgs, script: Option<&Path>) -> Result<Runtime> {
    let mut rt = Runtime::new(backend(cfg, script)?);
    if let Some(sb) = sandbox(cfg, common)? {
        rt = rt.with_sandbox(sb);
    }
    Ok(rt)
}

fn open_db(cfg: &RunConfig) -> Result<DbHandle> {
    let Some(path) = &cfg.db else { bail!("no database given: pass --db or set `db` in the config file") };
    if !path.exists() {
        bail!("database not found: {}", path.display());
    }
    let mut db = open_database(path, cfg.pipeline.dialect, true).with_context(|| format!("opening {}", path.display()))?;
    for (name, p) in &cfg.attach {
        db.attach(name, p).with_context(|| format!("attaching {} as {name}", p.display()))?;
    }
    Ok(db)
}

pub fn run(args: &RunArgs) -> Result<i32> {
    let cfg = args.common.resolve()?;
    let Some(question) = args.question.clone().or_else(|| cfg.question.clone()) else {
        bail!("no question given: pass --question or set `question` in the config file");
    };
    let db = open_db(&cfg)?;
    let mut docs = Vec::new();
    for p in cfg.docs.iter().chain(&args.doc) {
        docs.push(Document::read(p).with_context(|| format!("reading document {}", p.display()))?);
    }
    let rt = runtime(&cfg, &args.common, cfg.script.as_deref())?;
    let answer = answer_question(&question, &db, &docs, &cfg.pipeline, &rt);

    if let Some(p) = &cfg.trace {
        answer.trace.write_jsonl(p).with_context(|| format!("writing trace {}", p.display()))?;
    }
    if let Some(p) = &cfg.report {
        fs::write(p, answer.to_json()).with_context(|| format!("writing report {}", p.display()))?;
    }
    if args.json {
        println!("{}", answer.to_json());
    } else {
        println!("status: {}", if answer.succeeded() { "SUCCEEDED" } else { "FAILED" });
        if let Some(f) = &answer.failure {
            println!("failure: {f}");
        }
        for w in &answer.stats.warnings {
            println!("warning: {w}");
        }
        if let Some(sql) = &answer.final_sql {
            println!("\n{sql}\n");
        }
        if let Some(t) = &answer.final_result {
            print!("{}", t.render_text(PREVIEW_ROWS));
        }
        let s = &answer.stats;
        println!(
            "\ncandidates: {}  classes: {}  llm calls: {}  tokens: {}{}",
            s.candidates.len(),
            answer.classes.len(),
            s.llm_calls,
            s.tokens,
            if s.transpiled { "  (transpiled from Python)" } else { "" }
        );
    }
    Ok(if answer.succeeded() { EXIT_OK } else { EXIT_FAILED })
}

pub fn bench(args: &BenchArgs) -> Result<i32> {
    let mut cfg = args.common.resolve()?;
    if let Some(w) = args.workers {
        cfg.bench_workers = w;
    }
    let Some(manifest) = args.manifest.clone().or_else(|| cfg.manifest.clone()) else {
        bail!("no manifest given: pass --manifest or set `manifest` in the config file");
    };
    let items = load_manifest(&manifest)?;
    let opts = BenchOptions {
        workers: cfg.workers(),
        score: ScoreOptions {
            tolerance: cfg.pipeline.tolerance,
            allow_extra_columns: args.allow_extra_columns,
            ..Default::default()
        },
    };
    let make_runtime = |item: &BenchmarkItem| {
        let script = item.script.as_deref().or(cfg.script.as_deref());
        runtime(&cfg, &args.common, script).map_err(|e| format!("{e:#}"))
    };
    let report = run_benchmark(&items, &cfg.pipeline, make_runtime, &opts);
    let text = report.render_text();
    print!("{text}");
    if let Some(p) = &cfg.report {
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(p, json).with_context(|| format!("writing report {}", p.display()))?;
        fs::write(p.with_extension("txt"), &text)?;
    }
    Ok(EXIT_OK)
}

pub fn transpile(args: &TranspileArgs) -> Result<i32> {
    let cfg = args.common.resolve()?;
    let db = open_db(&cfg)?;
    let source = fs::read_to_string(&args.python).with_context(|| format!("reading {}", args.python.display()))?;
    let expected = table_csv::read_file(&args.expected).map_err(anyhow::Error::msg)?;
    let snapshot = db.snapshot_hierarchy()?;
    let view = Arc::new(SchemaView::with_patterns(&snapshot, &cfg.pipeline.suffix_patterns));
    let ctx = PlanningContext {
        question: args.question.clone(),
        knowledge_summary: String::new(),
        relevant_schemas: view.snapshot.schema_names(),
        view,
        dialect: cfg.pipeline.dialect,
    };
    let main = backend(&cfg, cfg.script.as_deref())?;
    let tiers = [
        TranspileTier { tier: 1, backend: main.as_ref(), llm: cfg.pipeline.llm.clone() },
        TranspileTier { tier: 2, backend: main.as_ref(), llm: cfg.pipeline.tier2_llm() },
    ];
    let trace = TraceLog::default();
    let outcome = transpile_to_sql(&source, None, &expected, &ctx, &cfg.pipeline, &db, &tiers, &trace);
    if let Some(p) = &cfg.trace {
        trace.write_jsonl(p)?;
    }
    match outcome {
        Ok(out) => {
            println!("-- verified by tier {} after {} attempt(s)\n{}", out.tier, out.attempts, out.sql);
            Ok(EXIT_OK)
        }
        Err(e) => {
            println!("{e}");
            Ok(EXIT_FAILED)
        }
    }
}

pub fn inspect_trace(args: &InspectArgs) -> Result<i32> {
    let file = fs::File::open(&args.trace).with_context(|| format!("opening {}", args.trace.display()))?;
    let events = read_jsonl(BufReader::new(file)).map_err(anyhow::Error::msg)?;
    let start = events.first().map_or(0, |e| e.timestamp);
    let mut tokens = 0;
    for e in events.iter().filter(|e| args.candidate.as_ref().is_none_or(|c| &e.candidate_id == c)) {
        tokens += e.tokens;
        let mut line = format!("+{:>6}ms {:<9} {:<14}", e.timestamp.saturating_sub(start), e.candidate_id, e.phase);
        if let Some(t) = &e.tool_name {
            line.push_str(&format!(" tool={t}"));
        }
        if let Some(v) = &e.verdict {
            line.push_str(&format!(" {v}"));
        }
        if let Some(d) = &e.digest {
            line.push_str(&format!(" #{}", &d[..d.len().min(12)]));
        }
        if e.tokens > 0 {
            line.push_str(&format!(" [{} tok]", e.tokens));
        }
        if let Some(d) = &e.detail {
            if args.full {
                line.push_str(&format!("\n    {}", d.replace('\n', "\n    ")));
            } else if let Some(first) = d.lines().next() {
                line.push_str(&format!("  {first}"));
            }
        }
        println!("{line}");
    }
    println!("{} events, {} tokens", events.len(), tokens);
    Ok(EXIT_OK)
}

pub fn show_config(args: &CommonArgs) -> Result<i32> {
    print!("{}", args.resolve()?.to_toml());
    Ok(EXIT_OK)
}
