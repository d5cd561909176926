use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rasr_bench::{generator, image};
use rasr_core::metrics::{psnr, ssim};
use rasr_core::retrieval::{random_unit, synthetic_index};
use rasr_core::rng;

fn query(c: &mut Criterion) {
    let index = synthetic_index(84_991, 64, 1);
    let mut r = rng::stream(2, &[]);
    let q = random_unit(&mut r, 64);
    c.bench_function("query_top1_84991x64", |b| b.iter(|| index.query(black_box(&q), 1).unwrap()));
    c.bench_function("query_top5_84991x64", |b| b.iter(|| index.query(black_box(&q), 5).unwrap()));
}

fn generate(c: &mut Criterion) {
    let state = generator(0);
    let lr = image(0, 16, 1);
    let reference = image(0, 64, 2);
    let mut g = c.benchmark_group("generate_16_to_64");
    g.sample_size(20);
    g.bench_function("no_reference", |b| {
        b.iter(|| state.generate(black_box(&lr), None, "striped fabric", 0.5).unwrap())
    });
    g.bench_function("with_reference", |b| {
        b.iter(|| state.generate(black_box(&lr), Some(&reference), "striped fabric", 0.5).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let a = image(3, 256, 1);
    let b = image(3, 256, 2);
    c.bench_function("ssim_256", |bn| bn.iter(|| ssim(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("psnr_256", |bn| bn.iter(|| psnr(black_box(&a), black_box(&b)).unwrap()));
}

criterion_group!(benches, query, generate, metrics);
criterion_main!(benches);
