use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use objprop_bench::{frame_pair, suite};
use objprop_core::{
    inter_frame_affinity, normalize_affinity, propagate_attention, run_propagation, BoundingBox,
    NormalizeMode, PropagationConfig,
};

fn affinity(c: &mut Criterion) {
    let s = suite(1);
    let (f_t, f_prev) = frame_pair(&s);
    let mut g = c.benchmark_group("affinity");
    g.bench_function("raw", |b| b.iter(|| inter_frame_affinity(black_box(&f_t), black_box(&f_prev))));
    let raw = inter_frame_affinity(&f_t, &f_prev).unwrap();
    for (name, mode, temp) in [("l1", NormalizeMode::L1, 1.0), ("softmax", NormalizeMode::Softmax, 0.02)] {
        g.bench_with_input(BenchmarkId::new("normalize", name), &raw, |b, raw| {
            b.iter(|| normalize_affinity(black_box(raw), mode, temp, 1e-12))
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let s = suite(1);
    let (f_t, f_prev) = frame_pair(&s);
    let bbox = BoundingBox::new(30, 40, 70, 90).unwrap();
    let mut g = c.benchmark_group("propagate_attention");
    for (name, cfg) in [("l1", PropagationConfig::default()), ("softmax", run_propagation())] {
        g.bench_function(name, |b| {
            b.iter(|| propagate_attention(black_box(&f_t), black_box(&f_prev), &bbox, &cfg))
        });
    }
    g.finish();
}

criterion_group!(benches, affinity, attention);
criterion_main!(benches);
