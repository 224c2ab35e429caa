//! Model hot paths: teacher-forced forward pass and the two decode modes
//! the throughput comparison is built on.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ink_bench::{bench_model, synthetic_sources, synthetic_store};
use ink_core::{DecodeConfig, KernelSpec};

fn teacher_forced_forward(c: &mut Criterion) {
    let model = bench_model(5);
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = synthetic_sources(8, 10, 6)
        .into_iter()
        .zip(synthetic_sources(8, 10, 7))
        .collect();
    c.bench_function("teacher_forced_forward/len10", |b| {
        let mut i = 0;
        b.iter(|| {
            let (src, tgt) = &pairs[i % pairs.len()];
            i += 1;
            black_box(model.forward_teacher_forced(black_box(src), black_box(tgt)).unwrap())
        });
    });
}

fn decode_modes(c: &mut Criterion) {
    let model = bench_model(5);
    let sources = synthetic_sources(8, 10, 6);
    let ds = synthetic_store(8_000, 64, 9);
    let cfg = DecodeConfig { beam_size: 4, length_penalty: 0.6, max_len: 24 };

    let mut group = c.benchmark_group("decode");
    group.sample_size(20);
    group.bench_function("adapter_only", |b| {
        let mut i = 0;
        b.iter(|| {
            let src = &sources[i % sources.len()];
            i += 1;
            black_box(model.decode(black_box(src), &cfg).unwrap())
        });
    });
    group.bench_function("knn_interpolated", |b| {
        let mut i = 0;
        b.iter(|| {
            let src = &sources[i % sources.len()];
            i += 1;
            black_box(
                model
                    .decode_with_store(black_box(src), &ds, KernelSpec::default(), 0.5, 8, &cfg)
                    .unwrap(),
            )
        });
    });
    group.finish();
}

criterion_group!(benches, teacher_forced_forward, decode_modes);
criterion_main!(benches);
