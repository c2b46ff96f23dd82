//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so each criterion reports exactly once.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::json;

use common::{context_for, counts_table, patents, phase, sql_block, timeless};
use flexsql_core::config::PipelineConfig;
use flexsql_core::context::SchemaView;
use flexsql_core::db::{canonicalize, results_equivalent, Cell, ExecLimits, NumTolerance, ResultTable};
use flexsql_core::eval::{
    aggregate_report, extract_tables, majority_at_k, micro_at_k, pass_at_k, schema_linking_prf, GoldAnswer,
    ItemEvaluation, Prf, RunRecord, SampleStats, ScoreOptions,
};
use flexsql_core::fixtures::{self, text_step, PATENTS_QUESTION};
use flexsql_core::llm::{FnBackend, Message, ScriptedBackend, ToolCallRequest};
use flexsql_core::pipeline::{
    answer_question, candidate_id, majority_vote, read_jsonl, run_candidate, transpile_to_sql, Candidate,
    CandidateEnv, CandidateStatus, Language, Plan, Program, Runtime, TraceEvent, TraceLog, TranspileTier,
};
use flexsql_core::sandbox::{StubRule, StubSandbox};
use flexsql_core::tools::{ToolLimits, ToolSession};

type Check = fn() -> String;

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("motivating-example replay", motivating_example_replay),
        ("budget state machine", budget_state_machine),
        ("voting oracle", voting_oracle),
        ("equivalence properties", equivalence_properties),
        ("tool oracles", tool_oracles),
        ("transpilation loop", transpilation_loop),
        ("metrics arithmetic", metrics_arithmetic),
        ("ablation flags", ablation_flags),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(panic) => {
                failed += 1;
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Motivating example

fn motivating_example_replay() -> String {
    let fx = patents();
    let config = PipelineConfig { k: 3, ..Default::default() };
    let oracle = counts_table(false, false, &fx.seed);
    let mut runs = Vec::new();
    let mut slowest = Duration::ZERO;
    for _ in 0..5 {
        let backend = Arc::new(ScriptedBackend::new(fixtures::fig1_script()));
        let started = Instant::now();
        let ans = answer_question(PATENTS_QUESTION, &fx.db, &[], &config, &Runtime::new(backend.clone()));
        slowest = slowest.max(started.elapsed());
        assert!(ans.succeeded(), "run failed: {:?}", ans.failure);
        assert_eq!(backend.consumed(), backend.len(), "script not fully consumed");
        runs.push((ans.to_json(), timeless(&ans.trace.events()), ans));
    }
    assert!(slowest < Duration::from_secs(5), "slowest run took {slowest:?}");
    for r in &runs[1..] {
        assert_eq!(r.0, runs[0].0, "final answers differ between runs");
        assert_eq!(r.1, runs[0].1, "traces differ between runs");
    }
    let ans = &runs[0].2;

    // Plans A/B/C differ in which citation tables they count.
    let citation = ["citation_record", "foreign_refs", "app_refs"];
    let mut by_candidate = Vec::new();
    for c in &ans.candidates {
        let sql = &c.program.as_ref().expect("program").source;
        let used: Vec<&str> =
            citation.iter().copied().filter(|t| extract_tables(sql).tables.contains(*t)).collect();
        by_candidate.push((c.plan.narrative.split(':').next().unwrap_or("").to_string(), used));
    }
    assert_eq!(
        by_candidate,
        vec![
            ("Plan A".to_string(), vec!["citation_record"]),
            ("Plan B".to_string(), vec!["citation_record", "foreign_refs"]),
            ("Plan C".to_string(), vec!["citation_record", "foreign_refs", "app_refs"]),
        ]
    );

    // Consensus class is {A, B}; its output matches the hand-computed oracle.
    let vote = ans.vote.as_ref().expect("vote");
    let winner = vote.winner_class().expect("winner");
    assert_eq!(winner.members, vec!["c1", "c2"]);
    assert!(results_equivalent(ans.final_result.as_ref().unwrap(), &oracle, false, NumTolerance::default()));
    let final_sql = ans.final_sql.as_deref().expect("final sql");
    for code in fixtures::ms_codes() {
        assert!(final_sql.contains(&format!("'{code}'")), "final SQL lacks {code}");
    }
    assert!(final_sql.contains("field_code IN"));
    format!("5 identical runs, consensus {{c1,c2}} of 3, slowest {:.0?}", slowest)
}

// ---------------------------------------------------------------------------
// Budget state machine

#[derive(Clone, Copy, Debug, PartialEq)]
enum V {
    Ok,
    Code,
    Plan,
}

/// Independent model of the documented loop: returns (succeeded, synth calls,
/// max repairs of one program, backtracks).
fn model(seq: &[V], r: usize, b: usize) -> (bool, usize, usize, usize) {
    let (mut synth, mut max_rep, mut bt, mut i) = (0, 0, 0, 0);
    loop {
        synth += 1;
        let mut attempt = 0;
        loop {
            let v = seq[i];
            i += 1;
            match v {
                V::Ok => return (true, synth, max_rep, bt),
                V::Code if attempt < r => {
                    attempt += 1;
                    synth += 1;
                    max_rep = max_rep.max(attempt);
                }
                V::Plan if bt < b => {
                    bt += 1;
                    break;
                }
                _ => return (false, synth, max_rep, bt),
            }
        }
    }
}

fn verdict_backend(seq: Vec<V>) -> FnBackend {
    let cursor = Mutex::new((0usize, 0usize));
    FnBackend::new(move |messages, _tools| {
        let mut st = cursor.lock().unwrap();
        let reply = match phase(messages).as_str() {
            "program-synthesis" | "program-repair" => {
                st.1 += 1;
                sql_block(&format!("SELECT {} AS n", st.1))
            }
            "output-review" => {
                let v = seq[st.0];
                st.0 += 1;
                match v {
                    V::Ok => "VERDICT: OK".to_string(),
                    V::Code => "VERDICT: CODE_ERROR\nREASON: wrong column".to_string(),
                    V::Plan => "VERDICT: PLAN_ERROR\nREASON: wrong table".to_string(),
                }
            }
            "plan-backtrack" => format!("<plan language=\"SQL\">Revised plan {}</plan>", st.0),
            other => panic!("unexpected phase {other}"),
        };
        Ok(Message::assistant(reply))
    })
}

fn budget_state_machine() -> String {
    let fx = patents();
    let ctx = context_for(&fx.db, "How many filings?");
    let mut rng = StdRng::seed_from_u64(0xB0D6E7);
    let mut no_repair_runs = 0;
    for case in 0..200 {
        let no_repair = case % 5 == 0;
        let config = PipelineConfig {
            k: 1,
            m: 1,
            repairs: 3,
            backtracks: rng.gen_range(0..=2),
            no_repair,
            plan_review: false,
            ..Default::default()
        };
        let budgets = config.budgets();
        let seq: Vec<V> = (0..16)
            .map(|_| match rng.gen_range(0..10) {
                0 | 1 => V::Ok,
                2..=6 => V::Code,
                _ => V::Plan,
            })
            .collect();
        let backend = verdict_backend(seq.clone());
        let session = ToolSession::new(candidate_id(1), ctx.view.clone(), fx.db.reopen().unwrap(), None, ToolLimits::default());
        let trace = TraceLog::default();
        let mut env = CandidateEnv::new(&ctx, &config, &backend, session, trace.clone());
        let c = run_candidate(1, Plan::sampled("p1", "count filings", Some(Language::Sql)), budgets, &mut env);

        let (r, b) = (budgets.repairs, budgets.backtracks);
        let expected = model(&seq, r, b);
        let got = (c.status == CandidateStatus::Succeeded, c.synth_calls as usize, c.max_program_repairs as usize, c.backtrack_count as usize);
        assert_eq!(got, expected, "case {case}: seq {seq:?} R={r} B={b}");
        assert!(c.max_program_repairs <= 3 && c.backtrack_count as usize <= b, "case {case}");
        assert!(got.1 <= (b + 1) * (r + 1), "case {case}: {} synth calls", got.1);
        // The same count is visible in the trace alone.
        let synth_events = trace
            .events()
            .iter()
            .filter(|e| e.phase == "synthesize" || e.phase == "repair")
            .count();
        assert_eq!(synth_events, got.1, "case {case}: trace synth count");
        if no_repair {
            assert_eq!(c.synth_calls, 1, "case {case}: no_repair must synthesize once");
            no_repair_runs += 1;
        }
    }
    format!("200 sequences matched the reference model ({no_repair_runs} with no_repair)")
}

// ---------------------------------------------------------------------------
// Voting

fn candidate(index: usize, lang: Language, table: Option<ResultTable>) -> Candidate {
    Candidate {
        index,
        id: candidate_id(index),
        plan: Plan::sampled(format!("p{index}"), "plan", None),
        program: Some(Program { plan_id: format!("p{index}"), language: lang, source: format!("q{index}"), attempt: 0 }),
        status: if table.is_some() { CandidateStatus::Succeeded } else { CandidateStatus::Failed },
        result: table.map(Ok),
        last_verdict: None,
        repair_count: 0,
        max_program_repairs: 0,
        backtrack_count: 0,
        synth_calls: 1,
        llm_calls: 0,
        tokens: 0,
        tool_counts: BTreeMap::new(),
    }
}

fn small_table(rng: &mut StdRng) -> ResultTable {
    let rows = rng.gen_range(0..3);
    let mut data: Vec<Vec<Cell>> = (0..rows)
        .map(|_| {
            vec![
                Cell::Integer(rng.gen_range(0..2)),
                match rng.gen_range(0..3) {
                    0 => Cell::Real(rng.gen_range(0..2) as f64 + 0.5),
                    1 => Cell::Text(["x", "y"][rng.gen_range(0..2)].to_string()),
                    _ => Cell::Null,
                },
            ]
        })
        .collect();
    data.shuffle(rng);
    ResultTable::new(vec!["a".into(), "b".into()], data)
}

/// Partition by pairwise equivalence, no hashing involved.
fn brute_force_classes(cands: &[Candidate]) -> Vec<Vec<usize>> {
    let tol = NumTolerance::default();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for c in cands.iter().filter(|c| c.table().is_some()) {
        let t = c.table().unwrap();
        match classes.iter_mut().find(|cl| {
            let rep = cands.iter().find(|x| x.index == cl[0]).unwrap().table().unwrap();
            results_equivalent(rep, t, false, tol)
        }) {
            Some(cl) => cl.push(c.index),
            None => classes.push(vec![c.index]),
        }
    }
    classes
}

/// Documented rule: largest, then containing SQL, then lowest member index.
fn rule_winner(cands: &[Candidate], classes: &[Vec<usize>]) -> Option<Vec<usize>> {
    let has_sql = |cl: &Vec<usize>| cl.iter().any(|i| cands.iter().any(|c| c.index == *i && c.language() == Some(Language::Sql)));
    classes
        .iter()
        .min_by_key(|cl| (std::cmp::Reverse(cl.len()), !has_sql(cl), *cl.iter().min().unwrap()))
        .cloned()
}

fn voting_oracle() -> String {
    let mut rng = StdRng::seed_from_u64(0x5E7E);
    let mut ties = 0;
    for set in 0..500 {
        let n = rng.gen_range(1..=8);
        let cands: Vec<Candidate> = (1..=n)
            .map(|i| {
                let lang = if rng.gen_bool(0.5) { Language::Sql } else { Language::Python };
                let table = if rng.gen_bool(0.85) { Some(small_table(&mut rng)) } else { None };
                candidate(i, lang, table)
            })
            .collect();
        let classes = brute_force_classes(&cands);
        let vote = majority_vote(&cands, NumTolerance::default());
        let max = classes.iter().map(Vec::len).max();
        assert_eq!(vote.winner_class().map(|c| c.size), max, "set {set}: winner is not a largest class");
        if classes.iter().filter(|c| Some(c.len()) == max).count() > 1 {
            ties += 1;
        }
        let expected = rule_winner(&cands, &classes);
        assert_eq!(vote.winner_class().map(|c| c.member_indices.clone()), expected, "set {set}");
        let mut sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(vote.classes.iter().map(|c| c.size).collect::<Vec<_>>(), sizes, "set {set}");
    }

    // Hand-built tie fixtures.
    let t = |v: i64| Some(ResultTable::new(vec!["v".into()], vec![vec![Cell::Integer(v)]]));
    let (py, sql) = (Language::Python, Language::Sql);
    let fixtures: Vec<(Vec<Candidate>, Vec<&str>)> = vec![
        // Equal size, only the second class has SQL.
        (vec![candidate(1, py, t(1)), candidate(2, py, t(1)), candidate(3, sql, t(2)), candidate(4, py, t(2))], vec!["c3", "c4"]),
        // Equal size, both with SQL: lowest member index.
        (vec![candidate(1, py, t(9)), candidate(2, sql, t(5)), candidate(3, sql, t(9))], vec!["c1", "c3"]),
        // All singletons, all Python: lowest index.
        (vec![candidate(1, py, t(3)), candidate(2, py, t(4)), candidate(3, py, t(5))], vec!["c1"]),
        // All singletons, one SQL.
        (vec![candidate(1, py, t(3)), candidate(2, py, t(4)), candidate(3, sql, t(5))], vec!["c3"]),
        // Size beats SQL membership.
        (vec![candidate(1, sql, t(1)), candidate(2, py, t(2)), candidate(3, py, t(2))], vec!["c2", "c3"]),
        // Failures never vote.
        (vec![candidate(1, sql, None), candidate(2, sql, None), candidate(3, py, t(7))], vec!["c3"]),
    ];
    for (i, (cands, want)) in fixtures.iter().enumerate() {
        let vote = majority_vote(cands, NumTolerance::default());
        assert_eq!(vote.winner_class().unwrap().members, *want, "tie fixture {i}");
    }
    format!("500 random sets agree with brute force ({ties} with tied maxima), {} tie fixtures", fixtures.len())
}

// ---------------------------------------------------------------------------
// Equivalence

/// Real with at most four significant digits.
fn coarse_real(rng: &mut StdRng) -> f64 {
    let mantissa = rng.gen_range(1..=9999) as f64;
    let sign = if rng.gen_bool(0.3) { -1.0 } else { 1.0 };
    sign * mantissa * 10f64.powi(rng.gen_range(-6..=4))
}

fn random_table(rng: &mut StdRng) -> ResultTable {
    let width = rng.gen_range(1..=4);
    let rows = rng.gen_range(0..=12);
    let data = (0..rows)
        .map(|_| {
            (0..width)
                .map(|_| match rng.gen_range(0..5) {
                    0 => Cell::Null,
                    1 => Cell::Integer(rng.gen_range(-50..50)),
                    2 | 3 => Cell::Real(coarse_real(rng)),
                    _ => Cell::Text(format!("{}{}", ["ab", "Ab", "z"][rng.gen_range(0..3)], " ".repeat(rng.gen_range(0..2)))),
                })
                .collect()
        })
        .collect();
    ResultTable::new((0..width).map(|i| format!("Col{i}")).collect(), data)
}

fn perturb(t: &ResultTable, rel: f64) -> (ResultTable, bool) {
    let mut touched = false;
    let rows = t
        .rows
        .iter()
        .map(|r| {
            r.iter()
                .map(|c| match c {
                    Cell::Real(x) => {
                        touched = true;
                        Cell::Real(x * (1.0 + rel))
                    }
                    other => other.clone(),
                })
                .collect()
        })
        .collect();
    (ResultTable::new(t.column_names.clone(), rows), touched)
}

fn equivalence_properties() -> String {
    let tol = NumTolerance::default();
    let mut rng = StdRng::seed_from_u64(0xE0E0);
    let mut with_reals = 0;
    for i in 0..1000 {
        let t = random_table(&mut rng);
        let c = canonicalize(&t, false, tol);
        assert_eq!(canonicalize(&c.to_table(), false, tol).digest, c.digest, "table {i}: not idempotent");
        let mut shuffled = t.clone();
        shuffled.rows.shuffle(&mut rng);
        assert_eq!(canonicalize(&shuffled, false, tol).digest, c.digest, "table {i}: permutation changed digest");
        let (close, touched) = perturb(&t, if rng.gen_bool(0.5) { 1e-6 } else { -1e-6 });
        assert!(results_equivalent(&t, &close, false, tol), "table {i}: 1e-6 deviation rejected");
        let (far, _) = perturb(&t, 1e-3);
        if touched {
            with_reals += 1;
            assert!(!results_equivalent(&t, &far, false, tol), "table {i}: 1e-3 deviation accepted");
        }
    }
    format!("1000 tables: idempotent, permutation invariant; tolerance boundary checked on {with_reals} tables with reals")
}

// ---------------------------------------------------------------------------
// Tools

fn tool_oracles() -> String {
    let fx = patents();
    let city_dir = tempfile::tempdir().unwrap();
    fixtures::build_city_db(city_dir.path()).unwrap();
    let city = fixtures::open_city(city_dir.path()).unwrap();

    // (session, file holding the table, qualified name, bare table, column)
    let mut targets: Vec<(usize, std::path::PathBuf, String, String, String)> = Vec::new();
    let dbs = [(fx.db.reopen().unwrap(), None), (city.reopen().unwrap(), Some(city_dir.path().to_path_buf()))];
    let mut sessions = Vec::new();
    for (i, (db, dir)) in dbs.into_iter().enumerate() {
        let view = Arc::new(SchemaView::build(&db.snapshot_hierarchy().unwrap()));
        for t in view.snapshot.tables() {
            let file = match &dir {
                None => fx.path.clone(),
                Some(d) => d.join(format!("{}.db", t.schema.to_lowercase())),
            };
            for c in &t.columns {
                targets.push((i, file.clone(), t.qualified_name.clone(), t.name.clone(), c.name.clone()));
            }
        }
        sessions.push(ToolSession::new("oracle", view, db, None, ToolLimits { distinct_values_cap: 4, find_rows_cap: 3, ..Default::default() }));
    }

    let mut rng = StdRng::seed_from_u64(0x7001);
    for n in 0..50 {
        let (s, file, qualified, bare, column) = targets.choose(&mut rng).unwrap().clone();
        let session = &sessions[s];
        let conn = rusqlite::Connection::open(&file).unwrap();
        let mut stmt = conn.prepare(&format!("SELECT \"{column}\" FROM \"{bare}\"")).unwrap();
        let all: Vec<Cell> = stmt
            .query_map([], |r| {
                Ok(match r.get_ref(0)? {
                    rusqlite::types::ValueRef::Null => Cell::Null,
                    rusqlite::types::ValueRef::Integer(i) => Cell::Integer(i),
                    rusqlite::types::ValueRef::Real(f) => Cell::Real(f),
                    rusqlite::types::ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
                    rusqlite::types::ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
                })
            })
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();

        // GetColValues against a hand-rolled distinct scan.
        let mut distinct: Vec<Cell> = Vec::new();
        for v in all.iter().filter(|v| !v.is_null()) {
            if !distinct.contains(v) {
                distinct.push(v.clone());
            }
        }
        let got = session.get_col_values(&column, &qualified);
        assert!(!got.is_error, "{n}: {}", got.rendered);
        let values: Vec<Cell> = got.payload["values"].as_array().unwrap().iter().map(|v| Cell::from_json(v).unwrap()).collect();
        assert_eq!(got.payload["distinct_total"], json!(distinct.len()), "{n}: {qualified}.{column} total");
        assert_eq!(values.len(), distinct.len().min(4), "{n}: {qualified}.{column} cap");
        assert!(values.iter().all(|v| distinct.contains(v)), "{n}: value outside the column");
        assert_eq!(got.truncated, distinct.len() > 4);

        // FindRows against a case-insensitive containment scan.
        let Some(sample) = distinct.choose(&mut rng) else { continue };
        let text = sample.render();
        let start = rng.gen_range(0..text.len().max(1));
        let mut term: String = text.chars().skip(start).take(2).collect();
        if term.is_empty() {
            term = text.clone();
        }
        if rng.gen_bool(0.5) {
            term = term.to_uppercase();
        }
        let expected: Vec<Cell> = all
            .iter()
            .filter(|v| !v.is_null() && v.render().to_lowercase().contains(&term.to_lowercase()))
            .cloned()
            .collect();
        let got = session.find_rows(&term, &column, &qualified, &[]);
        assert!(!got.is_error, "{n}: {}", got.rendered);
        let rows: Vec<Cell> = got.payload["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| Cell::from_json(&r[0]).unwrap())
            .collect();
        assert_eq!(rows, expected.iter().take(3).cloned().collect::<Vec<_>>(), "{n}: FindRows {term:?} on {qualified}.{column}");
        assert_eq!(got.truncated, expected.len() > 3);
    }

    // Pruning: the all-NULL column never reaches the model.
    let filing = sessions[0].get_table_col("FILING_INFO");
    assert!(!filing.rendered.contains("legacy_code"), "pruned column shown:\n{}", filing.rendered);
    assert!(filing.rendered.contains("filing_date"));
    assert!(sessions[0].get_col_values("legacy_code", "FILING_INFO").is_error);

    // Grouping: date-suffixed tables render as one entry.
    let ga_dir = tempfile::tempdir().unwrap();
    let ga_path = ga_dir.path().join("ga.db");
    fixtures::build_ga_session_db(&ga_path).unwrap();
    let ga = flexsql_core::db::open_database(&ga_path, flexsql_core::db::Dialect::Sqlite, true).unwrap();
    let view = Arc::new(SchemaView::build(&ga.snapshot_hierarchy().unwrap()));
    let session = ToolSession::new("ga", view, ga, None, ToolLimits::default());
    let schema = session.get_schema("main");
    let lines: Vec<&str> = schema.rendered.lines().filter(|l| l.starts_with("- ")).collect();
    assert_eq!(lines, vec!["- GA_SESSION_* (2 tables: 20240101…20240202)", "- USERS"], "{}", schema.rendered);
    let member = session.get_table_col("GA_SESSION_20240202");
    assert!(member.rendered.contains("Member of GA_SESSION_*"), "{}", member.rendered);
    assert!(!session.get_table_col("GA_SESSION_*").is_error);
    format!("50 sampled columns match DISTINCT/containment scans; pruning and GA_SESSION grouping rendered")
}

// ---------------------------------------------------------------------------
// Transpilation

const PY_A: &str = "# plan_a_py\nanswer = df_counts(citations_only=True)";
const PY_X: &str = "# plan_x_py\nanswer = df_counts(all_sources=True)";

fn python_reply(code: &str) -> String {
    format!("```python\n{code}\n```")
}

/// K=3 run: two Python candidates agree, the third emits `third`.
fn python_run_script(third_plan: &str, third_reply: &str) -> Vec<flexsql_core::llm::ScriptStep> {
    let plans = format!(
        "<plan language=\"PYTHON\">Plan P1: pandas count of earlier citations.</plan>\n\
<plan language=\"PYTHON\">Plan P2: loop over filings and count earlier citations.</plan>\n\
<plan language=\"SQL\">{third_plan}</plan>"
    );
    let mut s = vec![text_step(&["[phase: plan-generation]"], &plans)];
    for (tag, reply) in [("Plan P1:", python_reply(PY_A)), ("Plan P2:", python_reply(PY_A)), ("Plan P3:", third_reply.to_string())] {
        s.push(text_step(&["[phase: plan-review]", tag], "VERDICT: OK"));
        s.push(text_step(&["[phase: program-synthesis]", tag], &reply));
        s.push(text_step(&["[phase: output-review]", tag], "VERDICT: OK"));
    }
    s
}

fn transpile_events(events: &[TraceEvent]) -> Vec<String> {
    events.iter().filter(|e| e.phase == "transpile").map(|e| e.detail.clone().unwrap_or_default()).collect()
}

fn transpilation_loop() -> String {
    let fx = patents();
    let consensus = counts_table(false, false, &fx.seed);
    let plan_c_result = counts_table(true, true, &fx.seed);
    let stub = StubSandbox::new(vec![StubRule::answer("plan_a_py", &consensus), StubRule::answer("plan_x_py", &plan_c_result)]);
    let wrong = sql_block(&fixtures::plan_c_sql());
    let config = PipelineConfig { k: 3, ..Default::default() };

    // 1. Tier 1 fails twice, tier 2 succeeds on its first attempt.
    let mut script = python_run_script("Plan P3: count citations, foreign and application references.", &sql_block(&fixtures::plan_c_sql()));
    script.push(text_step(&["[phase: transpilation]", "plan_a_py"], &wrong));
    script.push(text_step(&["[phase: transpilation]", "differs"], "```sql\nSELECT patent_id FROM FILING_INFO\n```"));
    let tier1 = Arc::new(ScriptedBackend::new(script));
    let tier2 = Arc::new(ScriptedBackend::new(vec![text_step(&["[phase: transpilation]", "plan_a_py"], &sql_block(&fixtures::plan_a_sql()))]));
    let runtime = Runtime::new(tier1.clone()).with_tier2(tier2.clone()).with_sandbox(Arc::new(stub.clone()));
    let ans = answer_question(PATENTS_QUESTION, &fx.db, &[], &config, &runtime);
    assert!(ans.succeeded(), "{:?}", ans.failure);
    assert_eq!(tier1.consumed(), tier1.len());
    assert_eq!(tier2.consumed(), 1, "tier 2 must be called exactly once");
    assert_eq!(
        transpile_events(&ans.trace.events()),
        vec!["tier=1 attempt=1 rejected", "tier=1 attempt=2 rejected", "tier=2 attempt=3 verified"]
    );
    assert!(ans.stats.transpiled && ans.stats.transpile_tier == Some(2));
    let sql = ans.final_sql.as_deref().unwrap();
    let rerun = fx.db.execute_sql(sql, ExecLimits::answer()).unwrap();
    assert!(results_equivalent(&rerun, &consensus, false, NumTolerance::default()), "re-execution differs from consensus");
    assert_eq!(ans.stats.final_check, Some(true));

    // 2. Standalone transpile: tier 1 verifies immediately, so tier 2 is never asked.
    let ctx = context_for(&fx.db, PATENTS_QUESTION);
    let ok_tier = ScriptedBackend::new(vec![text_step(&["[phase: transpilation]"], &sql_block(&fixtures::plan_a_sql()))]);
    let unused = ScriptedBackend::new(vec![]);
    let tiers = [
        TranspileTier { tier: 1, backend: &ok_tier, llm: config.llm.clone() },
        TranspileTier { tier: 2, backend: &unused, llm: config.tier2_llm() },
    ];
    let out = transpile_to_sql(PY_A, None, &consensus, &ctx, &config, &fx.db, &tiers, &TraceLog::default()).unwrap();
    assert_eq!((out.tier, out.attempts), (1, 1));
    assert!(results_equivalent(&fx.db.execute_sql(&out.sql, ExecLimits::answer()).unwrap(), &consensus, false, NumTolerance::default()));

    // 3. All attempts fail, a SQL class exists: the fallback answers.
    let failing = |n: usize| (0..n).map(|_| text_step(&["[phase: transpilation]"], &wrong)).collect::<Vec<_>>();
    let mut script = python_run_script("Plan P3: count citations, foreign and application references.", &sql_block(&fixtures::plan_c_sql()));
    script.extend(failing(2));
    let main = Arc::new(ScriptedBackend::new(script));
    let runtime = Runtime::new(main).with_tier2(Arc::new(ScriptedBackend::new(failing(2)))).with_sandbox(Arc::new(stub.clone()));
    let ans = answer_question(PATENTS_QUESTION, &fx.db, &[], &config, &runtime);
    assert!(ans.succeeded(), "fallback should answer: {:?}", ans.failure);
    assert!(ans.stats.fallback_from.is_some() && !ans.stats.transpiled);
    assert!(ans.stats.warnings.iter().any(|w| w.contains("TranspilationFailed")));
    assert!(results_equivalent(ans.final_result.as_ref().unwrap(), &plan_c_result, false, NumTolerance::default()));

    // 4. All attempts fail and no class has SQL: TranspilationFailed after the fallback check.
    let mut script = python_run_script("Plan P3: count every reference kind in pandas.", &python_reply(PY_X));
    script.extend(failing(2));
    let runtime = Runtime::new(Arc::new(ScriptedBackend::new(script)))
        .with_tier2(Arc::new(ScriptedBackend::new(failing(2))))
        .with_sandbox(Arc::new(stub));
    let ans = answer_question(PATENTS_QUESTION, &fx.db, &[], &config, &runtime);
    assert!(!ans.succeeded());
    let failure = ans.failure.clone().unwrap_or_default();
    assert!(failure.contains("TranspilationFailed after 4 attempts"), "{failure}");
    let events = ans.trace.events();
    let fallback = events.iter().position(|e| e.phase == "fallback").expect("fallback attempted");
    let answer = events.iter().position(|e| e.phase == "answer").unwrap();
    assert!(fallback < answer && events[answer].verdict.as_deref() == Some("FAILED"));
    assert!(ans.final_sql.is_none());
    "tier 2 engaged once after two tier-1 rejections; re-execution matches consensus; fallback then TranspilationFailed".into()
}

// ---------------------------------------------------------------------------
// Metrics

fn int_gold(v: i64) -> GoldAnswer {
    GoldAnswer {
        result: ResultTable::new(vec!["g".into()], vec![vec![Cell::Integer(v)]]),
        tables: BTreeSet::from(["main.t".to_string()]),
        order_sensitive: false,
    }
}

fn labeled_item(id: &str, dataset: &str, golds: Vec<GoldAnswer>, samples: &[(Option<i64>, Language)]) -> ItemEvaluation {
    let opts = ScoreOptions::default();
    let records = samples
        .iter()
        .enumerate()
        .map(|(i, (v, lang))| {
            let table = v.map(|v| ResultTable::new(vec!["x".into()], vec![vec![Cell::Integer(v)]]));
            let stats = SampleStats { language: Some(*lang), tool_counts: BTreeMap::from([("GetSchema".to_string(), 1)]), ..Default::default() };
            RunRecord::scored(id, i + 1, None, table, &golds, stats, &opts)
        })
        .collect();
    ItemEvaluation { item_id: id.into(), dataset: dataset.into(), records, golds, error: None, predicted_tables: BTreeSet::new() }
}

fn metrics_arithmetic() -> String {
    use Language::{Python as P, Sql as S};
    let none = |n: usize| vec![(None, S); n];
    let cat = |a: Vec<(Option<i64>, Language)>, b: Vec<(Option<i64>, Language)>| [a, b].concat();
    let items = vec![
        // all eight correct
        labeled_item("q1", "lite", vec![int_gold(1)], &vec![(Some(1), S); 8]),
        // correct only at sample 2; majority picks 3
        labeled_item("q2", "lite", vec![int_gold(2)], &cat(vec![(Some(3), S), (Some(2), S), (Some(3), S), (Some(3), S), (Some(9), S), (Some(9), S)], none(2))),
        // two golds, the second matches: half credit
        labeled_item("q3", "lite", vec![int_gold(5), int_gold(6)], &cat(vec![(Some(6), S), (Some(6), S), (Some(6), S), (Some(5), S)], none(4))),
        // nothing succeeded
        labeled_item("q4", "snow", vec![int_gold(7)], &none(8)),
        // 2-2 tie: Python pair {8} vs SQL pair {4}; SQL wins the tie and is right
        labeled_item("q5", "snow", vec![int_gold(4)], &cat(vec![(Some(8), P), (Some(4), S), (Some(4), S), (Some(8), P)], none(4))),
        // three golds, the third matches: third credit
        labeled_item("q6", "snow", vec![int_gold(10), int_gold(11), int_gold(12)], &cat(vec![(Some(12), S), (Some(12), P), (Some(10), S)], none(5))),
    ];
    let opts = ScoreOptions::default();
    assert_eq!(pass_at_k(&items, 1), 3.0 / 6.0);
    assert_eq!(pass_at_k(&items, 8), 5.0 / 6.0);
    assert_eq!(majority_at_k(&items, 8, &opts), 4.0 / 6.0);
    let micro = micro_at_k(&items, 8, &opts);
    assert!((micro - 17.0 / 36.0).abs() < 1e-12, "micro {micro}");
    let mut prev = 0.0;
    for k in 1..=8 {
        let p = pass_at_k(&items, k);
        assert!(p >= prev, "pass_at_k not monotone at k={k}");
        assert!(majority_at_k(&items, k, &opts) <= p);
        prev = p;
    }
    // Record-level credit: q3 sample 1 matched gold index 1.
    assert_eq!(items[2].records[0].matched_gold_index, Some(1));
    assert!(items.iter().flat_map(|i| &i.records).all(|r| r.correct == r.matched_gold_index.is_some()));

    let report = aggregate_report(items, 8, &opts);
    assert_eq!(report.datasets["lite"].pass_at_1, 2.0 / 3.0);
    assert_eq!(report.datasets["snow"].majority_at_k, 2.0 / 3.0);
    assert_eq!(report.languages.only_sql + report.languages.only_python + report.languages.both, 4);
    assert_eq!((report.languages.only_sql, report.languages.both), (3, 1));
    assert_eq!(report.tool_totals["GetSchema"], 48);

    let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    assert_eq!(schema_linking_prf(&set(&["a", "b"]), &set(&["a", "c"])), Prf { precision: 0.5, recall: 0.5, f1: 0.5 });
    "Pass@1 1/2, Pass@8 5/6, Majority@8 2/3, micro 17/36; monotone in k; P/R/F1 (0.5, 0.5, 0.5)".into()
}

// ---------------------------------------------------------------------------
// Ablations, judged from trace JSONL only

fn trace_roundtrip(trace: &TraceLog) -> Vec<TraceEvent> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    trace.write_jsonl(&path).unwrap();
    read_jsonl(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap()
}

/// Well-behaved agent: tries PythonExecutor whenever it is offered.
fn eager_python_backend() -> FnBackend {
    FnBackend::new(|messages, tools| {
        let offered = tools.iter().any(|t| t.name.as_str() == "PythonExecutor");
        let used_tool = messages.iter().any(|m| m.tool_call_id.is_some());
        let ph = phase(messages);
        if offered && !used_tool && (ph == "plan-generation" || ph == "program-synthesis") {
            let call = ToolCallRequest::new("py1", "PythonExecutor", json!({"program": "print(1)"}));
            return Ok(Message::assistant("").with_tool_calls(vec![call]));
        }
        let text = match ph.as_str() {
            "plan-generation" => {
                let last = messages.iter().rev().find(|m| m.content.contains("Write exactly")).unwrap();
                let n: usize = last.content.split("Write exactly ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
                (0..n).map(|i| format!("<plan language=\"SQL\">Plan {i}: count Q1 2014 filings.</plan>")).collect::<Vec<_>>().join("\n")
            }
            "program-synthesis" => sql_block("SELECT COUNT(*) AS n FROM FILING_INFO"),
            _ => "VERDICT: OK".to_string(),
        };
        Ok(Message::assistant(text))
    })
}

fn python_calls(events: &[TraceEvent]) -> usize {
    events.iter().filter(|e| e.tool_name.as_deref() == Some("PythonExecutor")).count()
}

fn prior_plan_sections(events: &[TraceEvent]) -> (usize, usize) {
    let batches: Vec<&TraceEvent> = events.iter().filter(|e| e.phase == "plan_batch" && e.tool_name.is_none()).collect();
    let with = batches.iter().filter(|e| e.detail.as_deref().unwrap_or("").contains("## Previously generated plans")).count();
    (batches.len(), with)
}

fn final_verdict(events: &[TraceEvent]) -> String {
    events.iter().rev().find(|e| e.phase == "answer").and_then(|e| e.verdict.clone()).unwrap_or_default()
}

fn ablation_flags() -> String {
    let fx = patents();
    let run = |config: PipelineConfig| {
        let runtime = Runtime::new(Arc::new(eager_python_backend())).with_sandbox(Arc::new(StubSandbox::new(vec![])));
        let ans = answer_question("How many filings are there?", &fx.db, &[], &config, &runtime);
        trace_roundtrip(&ans.trace)
    };
    let base = PipelineConfig { k: 4, m: 2, ..Default::default() };

    let control = run(base.clone());
    assert!(python_calls(&control) > 0, "control run should use PythonExecutor");
    let sql_only = run(PipelineConfig { sql_only: true, ..base.clone() });
    assert_eq!(python_calls(&sql_only), 0, "sql_only run recorded PythonExecutor calls");
    assert_eq!(final_verdict(&sql_only), "SUCCEEDED");

    let (batches, with) = prior_plan_sections(&control);
    assert!(batches == 2 && with == 2, "diverse run: {with} of {batches} batches carry prior plans");
    let plain = run(PipelineConfig { no_diversity: true, ..base.clone() });
    let (batches, with) = prior_plan_sections(&plain);
    assert!(batches == 2 && with == 0, "no_diversity run: {with} of {batches} batches carry prior plans");

    let plan_error = |backtracks: usize| {
        let config = PipelineConfig { k: 1, m: 1, backtracks, ..Default::default() };
        let runtime = Runtime::new(Arc::new(ScriptedBackend::new(fixtures::plan_error_script())));
        let ans = answer_question(PATENTS_QUESTION, &fx.db, &[], &config, &runtime);
        final_verdict(&trace_roundtrip(&ans.trace))
    };
    assert_eq!(plan_error(1), "SUCCEEDED");
    assert_eq!(plan_error(0), "FAILED");
    format!("sql_only: 0 PythonExecutor records (control {}); no_diversity: 0 prior-plan sections; B=0 flips SUCCEEDED to FAILED", python_calls(&control))
}
