use channelout_bench::{conv_fixture, linear_fixture};
use channelout_core::sparse_exec::{dense_forward, sparse_conv_forward, sparse_dense_forward};
use channelout_core::tensor::conv2d;
use channelout_core::ChannelSelector;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn linear(c: &mut Criterion) {
    let mut group = c.benchmark_group("linear_after_channel_out");
    for k in [2, 4, 8] {
        let fx = linear_fixture(256, 512, k, ChannelSelector::ArgMax, 7);
        let (w, b) = (&fx.layer.weights, &fx.layer.bias);
        group.bench_with_input(BenchmarkId::new("dense", k), &k, |bench, _| {
            bench.iter(|| dense_forward(w, b, black_box(fx.masked.data())).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sparse", k), &k, |bench, _| {
            bench.iter(|| sparse_dense_forward(w, b, black_box(&fx.sparse)).unwrap())
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_after_channel_out");
    for k in [2, 4] {
        let fx = conv_fixture(16, 16, 16, k, 11);
        let (f, b) = (&fx.layer.filters, &fx.layer.bias);
        group.bench_with_input(BenchmarkId::new("dense", k), &k, |bench, _| {
            bench.iter(|| conv2d(black_box(&fx.masked), f, 1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sparse", k), &k, |bench, _| {
            bench.iter(|| sparse_conv_forward(f, b, 1, black_box(&fx.sparse)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, linear, conv);
criterion_main!(benches);
