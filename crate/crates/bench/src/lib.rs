//! Input generators shared by the criterion benches.

use flexsql_core::db::{Cell, ResultTable};
use flexsql_core::pipeline::{Candidate, CandidateStatus, Language, Plan, Program};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A mixed-type table with `rows` rows and four columns.
pub fn table(rows: usize, seed: u64) -> ResultTable {
    let mut rng = StdRng::seed_from_u64(seed);
    let data = (0..rows)
        .map(|i| {
            vec![
                Cell::Integer(i as i64),
                Cell::Real(rng.gen_range(-1e4..1e4)),
                Cell::Text(format!("name-{}", rng.gen_range(0..1000))),
                if rng.gen_bool(0.1) { Cell::Null } else { Cell::Integer(rng.gen_range(0..50)) },
            ]
        })
        .collect();
    ResultTable::new(vec!["id".into(), "score".into(), "name".into(), "bucket".into()], data)
}

/// `k` succeeded candidates whose outputs fall into `distinct` classes.
pub fn candidates(k: usize, distinct: usize, rows: usize) -> Vec<Candidate> {
    let tables: Vec<ResultTable> = (0..distinct).map(|d| table(rows, d as u64)).collect();
    (1..=k)
        .map(|i| Candidate {
            index: i,
            id: format!("c{i}"),
            plan: Plan::sampled(format!("p{i}"), "plan", None),
            program: Some(Program {
                plan_id: format!("p{i}"),
                language: if i % 2 == 0 { Language::Python } else { Language::Sql },
                source: String::new(),
                attempt: 0,
            }),
            result: Some(Ok(tables[i % distinct].clone())),
            status: CandidateStatus::Succeeded,
            last_verdict: None,
            repair_count: 0,
            max_program_repairs: 0,
            backtrack_count: 0,
            synth_calls: 1,
            llm_calls: 0,
            tokens: 0,
            tool_counts: Default::default(),
        })
        .collect()
}

/// A warehouse-style query with CTEs, subqueries and quoted names.
pub fn long_sql(ctes: usize) -> String {
    let mut sql = String::from("WITH ");
    for i in 0..ctes {
        if i > 0 {
            sql.push_str(", ");
        }
        sql.push_str(&format!(
            "t{i} AS (SELECT a.id, b.v FROM \"DB\".\"S{i}\".\"EVENTS_{i}\" a JOIN s{i}.lookup b ON a.k = b.k \
WHERE a.x IN (SELECT x FROM s{i}.filter_{i}))"
        ));
    }
    sql.push_str(" SELECT * FROM t0");
    for i in 1..ctes {
        sql.push_str(&format!(" JOIN t{i} USING (id)"));
    }
    sql
}
