use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mvu_core::accountant::{budget, cost_matrix, rdp_greedy_bound, rdp_lp_bound, renyi_matrix};
use mvu_core::designer::{build_bitwise_rr, design_mvu, SolverOptions};
use mvu_core::PrivacySpec;

fn design(c: &mut Criterion) {
    let mut g = c.benchmark_group("design_mvu");
    g.sample_size(10);
    let opts = SolverOptions {
        restarts: 0,
        ..SolverOptions::default()
    };
    for b in [1u32, 2, 3] {
        g.bench_with_input(BenchmarkId::new("pure_eps1", b), &b, |bench, &b| {
            bench.iter(|| design_mvu(PrivacySpec::pure(1.0), b, b, &opts).unwrap())
        });
    }
    g.finish();
}

fn accounting(c: &mut Criterion) {
    let table = build_bitwise_rr(2.0, 5).unwrap();
    let cost = cost_matrix(32, 1.0);
    let b = budget(32, 1.0, 0.5);
    let mut g = c.benchmark_group("accountant");
    g.bench_function("renyi_matrix/32x32", |bench| bench.iter(|| renyi_matrix(black_box(table.probs()), 4.0).unwrap()));
    let d = renyi_matrix(table.probs(), 4.0).unwrap();
    g.bench_function("lp_bound/32", |bench| bench.iter(|| rdp_lp_bound(black_box(&d), &cost, b, 128).unwrap()));
    g.bench_function("greedy_bound/32", |bench| bench.iter(|| rdp_greedy_bound(black_box(&d), &cost, b).unwrap()));
    g.finish();
}

criterion_group!(benches, design, accounting);
criterion_main!(benches);
