//! Small deterministic databases and replay scripts used by tests, the CLI
//! smoke tests and the benches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rusqlite::{params, Connection};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::db::{open_database, DbError, DbHandle, Dialect};
use crate::llm::{Message, ScriptStep, ToolCallRequest, Usage};

pub const PATENTS_QUESTION: &str =
    "Find patents filed in Q1 2014 in materials science, and count how many earlier patents each one cites.";

/// `MS-01` … `MS-09`.
pub fn ms_codes() -> Vec<String> {
    (1..=9).map(|i| format!("MS-{i:02}")).collect()
}

/// Rows seeded into the patents fixture, kept for oracles.
#[derive(Debug, Clone)]
pub struct PatentsSeed {
    /// (patent_id, filing_date, title)
    pub filings: Vec<(&'static str, &'static str, &'static str)>,
    /// (patent_id, field_code)
    pub tech: Vec<(&'static str, &'static str)>,
    /// (patent_id, cited id, date)
    pub citations: Vec<(&'static str, &'static str, &'static str)>,
    pub foreign: Vec<(&'static str, &'static str, &'static str)>,
    pub app: Vec<(&'static str, &'static str, &'static str)>,
}

impl PatentsSeed {
    fn in_q1_2014(date: &str) -> bool {
        ("2014-01-01"..="2014-03-31").contains(&date)
    }

    /// Patents filed in Q1 2014, any field.
    pub fn q1_2014_filings(&self) -> usize {
        self.filings.iter().filter(|f| Self::in_q1_2014(f.1)).count()
    }

    /// Q1 2014 materials-science patents.
    pub fn target_patents(&self) -> Vec<&'static str> {
        let ms = ms_codes();
        let mut out: Vec<&'static str> = self
            .filings
            .iter()
            .filter(|f| Self::in_q1_2014(f.1))
            .filter(|f| self.tech.iter().any(|t| t.0 == f.0 && ms.iter().any(|m| m == t.1)))
            .map(|f| f.0)
            .collect();
        out.sort();
        out
    }

    /// Earlier references per target patent, computed directly from the seed.
    pub fn earlier_counts(&self, with_foreign: bool, with_app: bool) -> BTreeMap<&'static str, i64> {
        let filed = |id: &str| self.filings.iter().find(|f| f.0 == id).map(|f| f.1).unwrap_or("");
        let count = |rows: &[(&str, &str, &str)], id: &str| {
            rows.iter().filter(|r| r.0 == id && r.2 < filed(id)).count() as i64
        };
        self.target_patents()
            .into_iter()
            .map(|id| {
                let mut n = count(&self.citations, id);
                if with_foreign {
                    n += count(&self.foreign, id);
                }
                if with_app {
                    n += count(&self.app, id);
                }
                (id, n)
            })
            .collect()
    }
}

pub fn patents_seed() -> PatentsSeed {
    PatentsSeed {
        filings: vec![
            ("P001", "2014-01-15", "Graphene laminate"),
            ("P002", "2014-02-03", "Ceramic binder"),
            ("P003", "2014-03-28", "Alloy coating"),
            ("P004", "2014-02-20", "Signal amplifier"),
            ("P005", "2014-04-02", "Polymer foam"),
            ("P006", "2013-12-30", "Glass fibre mesh"),
            ("P007", "2014-03-31", "Nanotube yarn"),
            ("P008", "2014-01-01", "Enzyme assay"),
            ("P009", "2014-01-10", "Porous silicon"),
            ("P010", "2012-06-01", "Carbon sheet"),
        ],
        tech: vec![
            ("P001", "MS-01"),
            ("P002", "MS-04"),
            ("P003", "MS-09"),
            ("P004", "EE-02"),
            ("P005", "MS-02"),
            ("P006", "MS-03"),
            ("P007", "MS-07"),
            ("P008", "BIO-01"),
            ("P009", "MS-05"),
            ("P010", "MS-01"),
        ],
        citations: vec![
            ("P001", "P010", "2012-06-01"),
            ("P001", "X100", "2010-01-01"),
            ("P001", "X101", "2015-01-01"),
            ("P002", "X102", "2013-05-05"),
            ("P002", "X103", "2013-07-07"),
            ("P002", "X104", "2014-01-01"),
            ("P003", "X105", "2014-03-29"),
            ("P003", "X106", "2011-02-02"),
            ("P007", "X107", "2009-09-09"),
            ("P007", "X108", "2010-10-10"),
            ("P007", "X109", "2011-11-11"),
            ("P007", "X110", "2012-12-12"),
            ("P004", "X111", "2010-01-01"),
            ("P005", "X112", "2010-01-01"),
            ("P006", "X113", "2010-01-01"),
        ],
        // none of these is an earlier reference of a target patent
        foreign: vec![
            ("P001", "FR-1", "2015-02-01"),
            ("P004", "FR-2", "2010-01-01"),
            ("P006", "FR-3", "2011-01-01"),
        ],
        app: vec![
            ("P001", "AP-1", "2013-11-11"),
            ("P007", "AP-2", "2013-02-02"),
            ("P002", "AP-3", "2016-01-01"),
        ],
    }
}

/// Writes the five-table patents database. FILING_INFO carries an all-NULL
/// `legacy_code` column so pruning has something to remove.
pub fn build_patents_db(path: &Path) -> rusqlite::Result<PatentsSeed> {
    let seed = patents_seed();
    let conn = Connection::open(path)?;
    conn.execute_batch(
        "CREATE TABLE TECH_CLASS (patent_id TEXT NOT NULL, field_code TEXT NOT NULL);
         CREATE TABLE FILING_INFO (patent_id TEXT PRIMARY KEY, filing_date TEXT NOT NULL, title TEXT, legacy_code TEXT);
         CREATE TABLE CITATION_RECORD (patent_id TEXT NOT NULL, cited_patent_id TEXT NOT NULL, cited_date TEXT NOT NULL);
         CREATE TABLE FOREIGN_REFS (patent_id TEXT NOT NULL, foreign_ref_id TEXT NOT NULL, ref_date TEXT NOT NULL);
         CREATE TABLE APP_REFS (patent_id TEXT NOT NULL, app_id TEXT NOT NULL, app_date TEXT NOT NULL);",
    )?;
    for (id, date, title) in &seed.filings {
        conn.execute("INSERT INTO FILING_INFO VALUES (?1, ?2, ?3, NULL)", params![id, date, title])?;
    }
    for (id, code) in &seed.tech {
        conn.execute("INSERT INTO TECH_CLASS VALUES (?1, ?2)", params![id, code])?;
    }
    for (table, rows) in [("CITATION_RECORD", &seed.citations), ("FOREIGN_REFS", &seed.foreign), ("APP_REFS", &seed.app)] {
        for (a, b, c) in rows {
            conn.execute(&format!("INSERT INTO {table} VALUES (?1, ?2, ?3)"), params![a, b, c])?;
        }
    }
    Ok(seed)
}

pub fn open_patents(path: &Path) -> Result<DbHandle, DbError> {
    open_database(path, Dialect::Sqlite, true)
}

/// Two schema files, `Transportation` and `Environment`, attached to an
/// empty main database. Returns the main database path.
pub fn build_city_db(dir: &Path) -> rusqlite::Result<PathBuf> {
    let main = dir.join("city.db");
    Connection::open(&main)?.execute_batch("PRAGMA user_version = 1;")?;
    let t = Connection::open(dir.join("transportation.db"))?;
    t.execute_batch(
        "CREATE TABLE BIKE_TRIPS (trip_id INTEGER, start_station TEXT, duration_min REAL);
         INSERT INTO BIKE_TRIPS VALUES (1, 'Pier 1', 12.5), (2, 'Market St', 30.0), (3, 'Pier 1', 8.0);
         CREATE TABLE TRAFFIC_COUNTS (sensor TEXT, day TEXT, vehicles INTEGER);
         INSERT INTO TRAFFIC_COUNTS VALUES ('A1', '2024-01-01', 1200), ('A1', '2024-01-02', 1100);",
    )?;
    let e = Connection::open(dir.join("environment.db"))?;
    e.execute_batch(
        "CREATE TABLE AIR_QUALITY (station TEXT, day TEXT, pm25 REAL);
         INSERT INTO AIR_QUALITY VALUES ('North', '2024-01-01', 8.2), ('South', '2024-01-01', 12.9);
         CREATE TABLE WASTE_PICKUPS (district TEXT, tons REAL);
         INSERT INTO WASTE_PICKUPS VALUES ('D1', 3.5), ('D2', 4.25);",
    )?;
    Ok(main)
}

pub fn open_city(dir: &Path) -> Result<DbHandle, DbError> {
    let mut h = open_database(dir.join("city.db"), Dialect::Sqlite, true)?;
    h.attach("Transportation", dir.join("transportation.db"))?;
    h.attach("Environment", dir.join("environment.db"))?;
    Ok(h)
}

/// Two date-suffixed session tables with one schema, plus a plain table.
pub fn build_ga_session_db(path: &Path) -> rusqlite::Result<()> {
    let conn = Connection::open(path)?;
    conn.execute_batch(
        "CREATE TABLE GA_SESSION_20240101 (visitor_id TEXT, pageviews INTEGER, channel TEXT);
         CREATE TABLE GA_SESSION_20240202 (visitor_id TEXT, pageviews INTEGER, channel TEXT);
         CREATE TABLE USERS (visitor_id TEXT, country TEXT);
         INSERT INTO GA_SESSION_20240101 VALUES ('v1', 3, 'organic'), ('v2', 1, 'email');
         INSERT INTO GA_SESSION_20240202 VALUES ('v1', 5, 'paid');
         INSERT INTO USERS VALUES ('v1', 'DE'), ('v2', 'FR');",
    )
}

/// SHA-256 of a file's bytes; used to prove read-only access.
pub fn file_checksum(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn step(matches: &[&str], respond: Message) -> ScriptStep {
    ScriptStep {
        match_substrings: matches.iter().map(|s| s.to_string()).collect(),
        respond,
        usage: Usage { prompt_tokens: 100, completion_tokens: 20, total_tokens: 120 },
    }
}

pub fn tool_step(matches: &[&str], id: &str, tool: &str, args: serde_json::Value) -> ScriptStep {
    step(matches, Message::assistant("").with_tool_calls(vec![ToolCallRequest::new(id, tool, args)]))
}

pub fn text_step(matches: &[&str], text: &str) -> ScriptStep {
    step(matches, Message::assistant(text))
}

fn ms_list() -> String {
    ms_codes().iter().map(|c| format!("'{c}'")).collect::<Vec<_>>().join(", ")
}

pub const PLAN_A: &str = "Plan A: keep FILING_INFO rows with filing_date between 2014-01-01 and 2014-03-31, join TECH_CLASS \
on patent_id and keep field_code MS-01 through MS-09. For each patent count CITATION_RECORD rows whose cited_date \
is before the filing date.";
pub const PLAN_B: &str = "Plan B: same patents as Plan A. Count earlier citations in CITATION_RECORD plus earlier \
references in FOREIGN_REFS (ref_date before the filing date).";
pub const PLAN_C: &str = "Plan C: same patents as Plan A. Count earlier references across CITATION_RECORD, \
FOREIGN_REFS and APP_REFS (app_date before the filing date).";

const TARGETS: &str = "FROM FILING_INFO f JOIN TECH_CLASS t ON t.patent_id = f.patent_id \
WHERE f.filing_date BETWEEN '2014-01-01' AND '2014-03-31' AND t.field_code IN";

pub fn plan_a_sql() -> String {
    format!(
        "SELECT f.patent_id, (SELECT COUNT(*) FROM CITATION_RECORD c WHERE c.patent_id = f.patent_id \
AND c.cited_date < f.filing_date) AS earlier_cited {TARGETS} ({})",
        ms_list()
    )
}

pub fn plan_b_sql() -> String {
    format!(
        "SELECT f.patent_id, (SELECT COUNT(*) FROM CITATION_RECORD c WHERE c.patent_id = f.patent_id \
AND c.cited_date < f.filing_date) + (SELECT COUNT(*) FROM FOREIGN_REFS r WHERE r.patent_id = f.patent_id \
AND r.ref_date < f.filing_date) AS earlier_cited {TARGETS} ({})",
        ms_list()
    )
}

pub fn plan_c_sql() -> String {
    format!(
        "SELECT f.patent_id, (SELECT COUNT(*) FROM CITATION_RECORD c WHERE c.patent_id = f.patent_id \
AND c.cited_date < f.filing_date) + (SELECT COUNT(*) FROM FOREIGN_REFS r WHERE r.patent_id = f.patent_id \
AND r.ref_date < f.filing_date) + (SELECT COUNT(*) FROM APP_REFS a WHERE a.patent_id = f.patent_id \
AND a.app_date < f.filing_date) AS earlier_cited {TARGETS} ({})",
        ms_list()
    )
}

fn sql_reply(sql: &str) -> String {
    format!("Final program:\n```sql\n{sql}\n```")
}

/// Replay of the motivating example with K=3 on the flat patents database:
/// exploration (GetSchema → GetTableCol → GetColValues → SQLExecutor),
/// three plans differing in citation tables, then review, synthesis and
/// output review per candidate.
pub fn fig1_script() -> Vec<ScriptStep> {
    let plan = "[phase: plan-generation]";
    let mut s = vec![
        tool_step(&[plan, "Write exactly 3 plans"], "call_1", "GetSchema", json!({"schema_name": "main"})),
        tool_step(&[plan, "TECH_CLASS"], "call_2", "GetTableCol", json!({"table_name": "TECH_CLASS"})),
        tool_step(
            &[plan, "field_code TEXT"],
            "call_3",
            "GetColValues",
            json!({"column_name": "field_code", "table_name": "TECH_CLASS"}),
        ),
        tool_step(
            &[plan, "MS-09"],
            "call_4",
            "SQLExecutor",
            json!({"sql_query": "SELECT COUNT(*) AS n FROM FILING_INFO WHERE filing_date BETWEEN '2014-01-01' AND '2014-03-31'"}),
        ),
        text_step(
            &[plan, "SQLExecutor"],
            &format!(
                "Materials science is field_code MS-01..MS-09 in TECH_CLASS; 7 filings fall in Q1 2014.\n\
<plan language=\"SQL\">{PLAN_A}</plan>\n<plan language=\"SQL\">{PLAN_B}</plan>\n<plan language=\"SQL\">{PLAN_C}</plan>"
            ),
        ),
    ];
    for (tag, sql) in [("Plan A:", plan_a_sql()), ("Plan B:", plan_b_sql()), ("Plan C:", plan_c_sql())] {
        s.push(text_step(&["[phase: plan-review]", tag], "VERDICT: OK\nAll tables and values exist."));
        s.push(text_step(&["[phase: program-synthesis]", tag], &sql_reply(&sql)));
        s.push(text_step(&["[phase: output-review]", tag], "VERDICT: OK\nREASON: one count per target patent"));
    }
    s
}

/// K=1 script: the first program is rejected as a plan-level error, the
/// backtracked plan (joining TECH_CLASS) succeeds. With B=0 the script is
/// cut short and the candidate fails.
pub fn plan_error_script() -> Vec<ScriptStep> {
    let wrong_plan = "Plan W: count CITATION_RECORD rows per FILING_INFO patent filed in Q1 2014.";
    let wrong_sql = "SELECT f.patent_id, COUNT(c.cited_patent_id) AS earlier_cited FROM FILING_INFO f \
LEFT JOIN CITATION_RECORD c ON c.patent_id = f.patent_id AND c.cited_date < f.filing_date \
WHERE f.filing_date BETWEEN '2014-01-01' AND '2014-03-31' GROUP BY f.patent_id";
    vec![
        text_step(&["[phase: plan-generation]"], &format!("<plan language=\"SQL\">{wrong_plan}</plan>")),
        text_step(&["[phase: plan-review]", "Plan W:"], "VERDICT: OK"),
        text_step(&["[phase: program-synthesis]", "Plan W:"], &sql_reply(wrong_sql)),
        text_step(
            &["[phase: output-review]", "Plan W:"],
            "VERDICT: PLAN_ERROR\nREASON: missed TECH_CLASS entirely; non materials-science patents are included",
        ),
        tool_step(
            &["[phase: plan-backtrack]", "missed TECH_CLASS"],
            "call_b1",
            "GetColValues",
            json!({"column_name": "field_code", "table_name": "TECH_CLASS"}),
        ),
        text_step(&["[phase: plan-backtrack]", "MS-01"], &format!("<plan language=\"SQL\">{PLAN_A}</plan>")),
        text_step(&["[phase: program-synthesis]", "Plan A:"], &sql_reply(&plan_a_sql())),
        text_step(&["[phase: output-review]", "Plan A:"], "VERDICT: OK\nREASON: filtered to materials science"),
    ]
}

pub fn script_json(steps: &[ScriptStep]) -> String {
    serde_json::to_string_pretty(steps).expect("script serializes")
}
