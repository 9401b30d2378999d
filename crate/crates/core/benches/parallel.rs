//! Single worker vs. the full pool on the data-parallel hot paths.
//!
//! Build with `--no-default-features` to measure the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metakernel::conv::{self, Padding};
use metakernel::harness::data::{generate_dataset, Split, SyntheticTaskConfig};
use metakernel::parallel;
use metakernel::sampler;
use metakernel::Tensor;

fn thread_counts() -> Vec<usize> {
    vec![1, parallel::current_num_threads().max(2)]
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[32, 16, 24, 24], 1.0, &mut rng);
    let k = Tensor::randn(&[16, 1, 7, 7], 1.0, &mut rng);
    let mut group = c.benchmark_group("depthwise_conv_7x7");
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| parallel::with_threads(t, || conv::depthwise_conv2d(&x, &k, 1, Padding::Same).unwrap()))
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let logits = [0.3, -1.0, 1.2, 0.0];
    let mut group = c.benchmark_group("gumbel_hard_samples_10k");
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| {
                parallel::with_threads(t, || {
                    parallel::map_indexed(10_000, |d| sampler::hard_sample_seeded(&logits, 1, d as u64).1)
                })
            })
        });
    }
    group.finish();
}

fn bench_data(c: &mut Criterion) {
    let cfg = SyntheticTaskConfig {
        train_samples: 2000,
        ..SyntheticTaskConfig::default()
    };
    let mut group = c.benchmark_group("synthetic_data_2k");
    group.sample_size(20);
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| parallel::with_threads(t, || generate_dataset(&cfg, Split::Train).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_sampling, bench_data);
criterion_main!(benches);
