use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchpool_core::pipeline::{run_pipeline, PipelineConfig};

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for m in [1, 2, 4, 8] {
        let config = PipelineConfig { m, ..PipelineConfig::default() };
        g.bench_with_input(BenchmarkId::new("synthetic", m), &config, |b, cfg| b.iter(|| run_pipeline(cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
