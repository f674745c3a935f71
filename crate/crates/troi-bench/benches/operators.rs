use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use troi_core::pipeline::{synthetic_boxes, synthetic_feature_map};
use troi_core::{
    most_similar_roi_align, most_similar_roi_align_naive, roi_align, tafa_forward,
    tafa_forward_naive, SplitMix64, TafaParams, TemporalRoiStack, Tensor,
};

struct Fixture {
    support: Tensor<f64>,
    target_features: Tensor<f64>,
    stack: TemporalRoiStack<f64>,
    params: TafaParams<f64>,
}

/// Production-scale single proposal: 14x14x256 map, 7x7 pool, K=4, N=4.
fn fixture(channels: usize, stack_len: usize) -> Fixture {
    let mut rng = SplitMix64::new(7);
    let map: Tensor<f64> = synthetic_feature_map(&mut rng, 14, 14, channels).unwrap();
    let support: Tensor<f64> = synthetic_feature_map(&mut rng, 14, 14, channels).unwrap();
    let roi = synthetic_boxes(&mut rng, 1, 14, 14)[0];
    let target_features = roi_align(&map, &roi, 7, 7, 2).unwrap();
    let frames: Vec<Tensor<f64>> = (0..stack_len)
        .map(|_| synthetic_feature_map(&mut rng, 7, 7, channels).unwrap())
        .collect();
    let stack = TemporalRoiStack::new(frames, 0).unwrap();
    let params = TafaParams::seeded(4, channels / 4, 7).unwrap();
    Fixture {
        support,
        target_features,
        stack,
        params,
    }
}

fn bench_ms_roi_align(c: &mut Criterion) {
    let mut group = c.benchmark_group("most_similar_roi_align");
    for &channels in &[64usize, 256] {
        let f = fixture(channels, 1);
        group.bench_with_input(BenchmarkId::new("naive", channels), &f, |b, f| {
            b.iter(|| {
                most_similar_roi_align_naive(
                    black_box(&f.target_features),
                    black_box(&f.support),
                    4,
                )
                .unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("vectorized", channels), &f, |b, f| {
            b.iter(|| {
                most_similar_roi_align(black_box(&f.target_features), black_box(&f.support), 4)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_tafa(c: &mut Criterion) {
    let mut group = c.benchmark_group("tafa_forward");
    for &channels in &[64usize, 256] {
        let f = fixture(channels, 15);
        group.bench_with_input(BenchmarkId::new("naive", channels), &f, |b, f| {
            b.iter(|| tafa_forward_naive(black_box(&f.stack), black_box(&f.params)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("vectorized", channels), &f, |b, f| {
            b.iter(|| tafa_forward(black_box(&f.stack), black_box(&f.params)).unwrap())
        });
    }
    group.finish();
}

fn bench_roi_align(c: &mut Criterion) {
    let mut rng = SplitMix64::new(9);
    let map: Tensor<f64> = synthetic_feature_map(&mut rng, 14, 14, 256).unwrap();
    let roi = synthetic_boxes(&mut rng, 1, 14, 14)[0];
    c.bench_function("roi_align 14x14x256 -> 7x7", |b| {
        b.iter(|| roi_align(black_box(&map), black_box(&roi), 7, 7, 2).unwrap())
    });
}

criterion_group!(benches, bench_ms_roi_align, bench_tafa, bench_roi_align);
criterion_main!(benches);
