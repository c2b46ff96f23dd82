use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use flexsql_bench::{candidates, long_sql, table};
use flexsql_core::db::{canonicalize, NumTolerance};
use flexsql_core::eval::extract_tables;
use flexsql_core::pipeline::majority_vote;

fn bench_canonicalize(c: &mut Criterion) {
    let mut g = c.benchmark_group("canonicalize");
    for rows in [100, 10_000] {
        let t = table(rows, 7);
        g.bench_with_input(BenchmarkId::from_parameter(rows), &t, |b, t| {
            b.iter(|| canonicalize(black_box(t), false, NumTolerance::default()))
        });
    }
    g.finish();
}

fn bench_vote(c: &mut Criterion) {
    let mut g = c.benchmark_group("majority_vote");
    for k in [8, 16] {
        let cands = candidates(k, 3, 500);
        g.bench_with_input(BenchmarkId::from_parameter(k), &cands, |b, cs| {
            b.iter(|| majority_vote(black_box(cs), NumTolerance::default()))
        });
    }
    g.finish();
}

fn bench_extract(c: &mut Criterion) {
    let sql = long_sql(20);
    c.bench_function("extract_tables/20_ctes", |b| b.iter(|| extract_tables(black_box(&sql))));
}

criterion_group!(benches, bench_canonicalize, bench_vote, bench_extract);
criterion_main!(benches);
