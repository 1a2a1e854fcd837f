use attrfuse_bench::attrfuse_core::attribution::attribution_weights;
use attrfuse_bench::attrfuse_core::metrics::MetricReport;
use attrfuse_bench::attrfuse_core::model::{fuse, FuseOptions};
use attrfuse_bench::attrfuse_core::{Graph, Tensor};
use attrfuse_bench::Fixture;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, size) in [(8, 32), (16, 64)] {
        let x = Tensor::from_fn(vec![1, ch, size, size], |i| (i % 17) as f64 / 17.0);
        let k = Tensor::from_fn(vec![ch, ch, 3, 3], |i| ((i % 7) as f64 - 3.0) / 10.0);
        group.bench_with_input(BenchmarkId::new("forward_backward", format!("c{ch}_{size}")), &(x, k), |b, (x, k)| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.param(x.clone());
                let kv = g.param(k.clone());
                let y = g.conv2d_same(xv, kv, None).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(kv).unwrap().sum())
            })
        });
    }
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let mut group = c.benchmark_group("fuse");
    group.sample_size(10);
    for stages in [2, 5] {
        let fx = Fixture::new(32, stages, 8);
        let opts = FuseOptions::default();
        group.bench_function(BenchmarkId::new("stages", stages), |b| {
            b.iter(|| black_box(fuse(&fx.model, &fx.sample.ir, &fx.sample.vi, &opts).unwrap()))
        });
    }
    group.finish();
}

fn attribution(c: &mut Criterion) {
    let mut group = c.benchmark_group("attribution_weights");
    group.sample_size(10);
    let fx = Fixture::new(32, 2, 8);
    let s = &fx.sample;
    for steps in [1, 5] {
        group.bench_function(BenchmarkId::new("ig_steps", steps), |b| {
            b.iter(|| black_box(attribution_weights(&fx.model.params.seg, &s.ir, &s.vi, &s.mask, steps, 1e-8).unwrap()))
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let fx = Fixture::new(128, 2, 8);
    let s = &fx.sample;
    let fused = s.ir.zip_with(&s.vi, |a, b| 0.5 * (a + b)).unwrap();
    c.bench_function("metrics_128", |b| b.iter(|| black_box(MetricReport::compute(&fused, &s.ir, &s.vi).unwrap())));
}

criterion_group!(benches, conv2d, fusion, attribution, metrics);
criterion_main!(benches);
