use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use mvu_bench::l1_clients;
use mvu_core::designer::build_generalized_rr;
use mvu_core::lattice::{dither_vector, dither_with_gamma, worst_case_gamma, DitherGrid, NormPreservingConfig};
use mvu_core::mechanisms::{privatize_vector, Payload, VectorSpec};
use mvu_core::rng::substream;

fn dithering(c: &mut Criterion) {
    let mut g = c.benchmark_group("dither");
    let x = &l1_clients(1, 128, 1)[0];
    for levels in [8usize, 512] {
        let grid = DitherGrid::symmetric(levels, 1.0).unwrap();
        g.throughput(Throughput::Elements(128));
        g.bench_with_input(BenchmarkId::new("plain", levels), &grid, |b, grid| {
            let mut rng = substream(2, 0);
            b.iter(|| dither_vector(black_box(x), grid, &mut rng).unwrap())
        });
    }
    let grid = DitherGrid::symmetric(512, 1.0).unwrap();
    let cfg = NormPreservingConfig::new(1.0, 0.01).with_norm_order(1.0);
    let gamma = worst_case_gamma(128, &grid, &cfg).unwrap();
    g.bench_function("norm_preserving/512", |b| {
        let mut rng = substream(3, 0);
        b.iter(|| dither_with_gamma(black_box(x), gamma, &grid, &cfg, &mut rng).unwrap())
    });
    g.finish();
}

fn privatization(c: &mut Criterion) {
    let table = build_generalized_rr(2.0, 3).unwrap();
    let spec = VectorSpec::new(128, 1.0, 1.0).unwrap();
    let x = &l1_clients(1, 128, 4)[0];
    let mut g = c.benchmark_group("privatize");
    g.throughput(Throughput::Elements(128));
    g.bench_function("vector/128", |b| {
        let mut rng = substream(5, 0);
        b.iter(|| privatize_vector(&table, black_box(x), &spec, &mut rng).unwrap())
    });
    let p = Payload::new((0..128).map(|k| k % 8).collect(), 3).unwrap();
    g.bench_function("pack/128x3", |b| b.iter(|| black_box(&p).pack()));
    let bytes = p.pack();
    g.bench_function("unpack/128x3", |b| b.iter(|| Payload::unpack(black_box(&bytes), 128, 3).unwrap()));
    g.finish();
}

criterion_group!(benches, dithering, privatization);
criterion_main!(benches);
