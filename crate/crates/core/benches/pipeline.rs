//! Surrogate training step, augmentation and noise gradient: the default
//! worker pool against a single-thread pool.

use std::hint::black_box;
use std::time::{Duration, Instant};

use armor_core::augment::{apply_policy, AugKind, AugPolicy};
use armor_core::data::{gen_synthetic, SyntheticSpec};
use armor_core::model::{build_surrogate, loss_and_grads, ArchDescriptor};
use armor_tensor::par;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn timed(threads: usize, iters: u64, f: impl Fn() + Sync) -> Duration {
    par::with_threads(threads, || {
        let start = Instant::now();
        for _ in 0..iters {
            f();
        }
        start.elapsed()
    })
}

fn pipeline(c: &mut Criterion) {
    let (train, _) = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let batch = train.select(&(0..64).collect::<Vec<_>>()).unwrap();
    let with_nl = build_surrogate(&ArchDescriptor::compact(3, 4), 0).unwrap();
    let plain = build_surrogate(&ArchDescriptor::compact(3, 4).without_nonlocal(), 0).unwrap();
    let policy = AugPolicy::uniform(AugKind::Rotate, 4).unwrap();

    let mut group = c.benchmark_group("surrogate_step");
    group.sample_size(20);
    for (name, threads) in [("pool", 0), ("sequential", 1)] {
        group.bench_function(BenchmarkId::new("nonlocal", name), |b| {
            b.iter_custom(|iters| timed(threads, iters, || drop(black_box(loss_and_grads(&with_nl, &batch).unwrap()))))
        });
        group.bench_function(BenchmarkId::new("plain", name), |b| {
            b.iter_custom(|iters| timed(threads, iters, || drop(black_box(loss_and_grads(&plain, &batch).unwrap()))))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("augment_rotate");
    for (name, threads) in [("pool", 0), ("sequential", 1)] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_custom(|iters| {
                timed(threads, iters, || {
                    let mut rng = ChaCha8Rng::seed_from_u64(1);
                    black_box(apply_policy(&batch, &policy, &mut rng).unwrap());
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
