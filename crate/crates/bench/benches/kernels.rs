use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchpool_bench::{distribution, index, pool, rng};
use patchpool_core::{js_divergence, kl_divergence, smooth_grid, top_m, Scope, SmoothingConfig};
use std::hint::black_box;

fn divergences(c: &mut Criterion) {
    let mut g = c.benchmark_group("divergence");
    for v in [16, 256, 1024, 8192] {
        let mut r = rng(v as u64);
        let (a, b) = (distribution(&mut r, v), distribution(&mut r, v));
        g.bench_with_input(BenchmarkId::new("js", v), &v, |bch, _| bch.iter(|| js_divergence(black_box(&a), black_box(&b))));
        g.bench_with_input(BenchmarkId::new("kl", v), &v, |bch, _| bch.iter(|| kl_divergence(black_box(&a), black_box(&b))));
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut g = c.benchmark_group("top_m");
    g.sample_size(20);
    for (n, dim) in [(1000, 512), (5000, 4096)] {
        let (idx, q) = index(1, n, dim);
        g.bench_function(BenchmarkId::from_parameter(format!("{n}x{dim}")), |b| b.iter(|| top_m(black_box(&q), &idx, 8)));
    }
    g.finish();
}

fn smoothing(c: &mut Criterion) {
    let mut g = c.benchmark_group("smooth_grid");
    g.sample_size(20);
    for m in [2, 4, 8, 16] {
        let (q, p) = pool(m as u64, 14, 14, 1024, m);
        let cfg = SmoothingConfig::defaults(m);
        g.bench_with_input(BenchmarkId::new("patch", m), &m, |b, _| b.iter(|| smooth_grid(&q, &p, &cfg).unwrap()));
    }
    let (q, p) = pool(3, 4, 4, 256, 8);
    let all = SmoothingConfig { scope: Scope::All, ..SmoothingConfig::defaults(8) };
    g.bench_function("all_patch_4x4_m8", |b| b.iter(|| smooth_grid(&q, &p, &all).unwrap()));
    g.finish();
}

criterion_group!(benches, divergences, retrieval, smoothing);
criterion_main!(benches);
