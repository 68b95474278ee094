//! Benchmarks for the workloads routed through the `parallel` module.
//!
//! The execution strategy is chosen at compile time by the `parallel`
//! feature, so compare the two by running the suite twice:
//!
//! ```text
//! cargo bench --bench parallel_vs_sequential
//! cargo bench --bench parallel_vs_sequential --no-default-features
//! ```
//!
//! Criterion keeps per-run baselines under `target/criterion`, so the second
//! run reports the relative change against the first.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use vesselseg::autodiff::{Tape, Tensor};
use vesselseg::compound::{compound, CompoundConfig, TrackedFrame, IDENTITY_POSE};
use vesselseg::volume::{median_filter3, resample, VolumeKind, VoxelVolume};

fn test_volume(dim: usize) -> VoxelVolume {
    let mut vol = VoxelVolume::zeros([dim; 3], VolumeKind::Intensity);
    for (i, v) in vol.data.iter_mut().enumerate() {
        *v = ((i * 2654435761) % 1000) as f32 / 1000.0;
    }
    vol
}

fn bench_median_filter(c: &mut Criterion) {
    let vol = test_volume(64);
    c.bench_function("median_filter3_64", |b| {
        b.iter(|| median_filter3(black_box(&vol)).unwrap())
    });
}

fn bench_resample(c: &mut Criterion) {
    let vol = test_volume(96);
    c.bench_function("resample_96_to_40pct", |b| {
        b.iter(|| resample(black_box(&vol), 0.4).unwrap())
    });
}

fn bench_conv3d(c: &mut Criterion) {
    let input = Tensor::new(
        vec![1, 8, 24, 24, 24],
        (0..8 * 24 * 24 * 24).map(|i| (i % 17) as f64 / 17.0).collect(),
    )
    .unwrap();
    let weight = Tensor::new(
        vec![8, 8, 3, 3, 3],
        (0..8 * 8 * 27).map(|i| (i % 5) as f64 / 5.0 - 0.4).collect(),
    )
    .unwrap();
    c.bench_function("conv3d_8x8_24cube", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(black_box(input.clone()), false);
            let w = tape.leaf(black_box(weight.clone()), false);
            tape.conv3d(x, w, None).unwrap()
        })
    });
}

fn bench_compound(c: &mut Criterion) {
    let frames: Vec<TrackedFrame> = (0..64)
        .map(|z| {
            let mut pose = IDENTITY_POSE;
            pose[2][3] = z as f64;
            TrackedFrame {
                pixels: (0..64 * 64).map(|i| (i % 13) as f32).collect(),
                height: 64,
                width: 64,
                pixel_spacing: [1.0, 1.0],
                pose,
            }
        })
        .collect();
    let cfg = CompoundConfig::default();
    c.bench_function("compound_64_frames", |b| {
        b.iter(|| compound(black_box(&frames), &cfg).unwrap())
    });
}

criterion_group!(
    benches,
    bench_median_filter,
    bench_resample,
    bench_conv3d,
    bench_compound
);
criterion_main!(benches);
