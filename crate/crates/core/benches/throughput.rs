//! Single worker versus the full rayon pool on the hot paths. Build with
//! `--no-default-features` to measure the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use featimit::metrics::{evaluate, MetricConfig};
use featimit::scoring::{multi_scale_score, FusionMode, ReferenceSize};
use featimit::student::init_student_bank;
use featimit::training::{fit, TrainConfig};
use featimit::{exec, load_teacher, Architecture, WeightsSource};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<usize> {
    let all = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let teacher = load_teacher(Architecture::Toy, &WeightsSource::Seed(0)).unwrap();
    let banks: Vec<_> = [64, 96, 128].iter().map(|&s| init_student_bank(&teacher, s, 0).unwrap()).collect();
    let image = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0f32));
    let train: Vec<Array3<f32>> = (0..8).map(|_| Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0f32))).collect();
    let maps: Vec<Array2<f64>> = (0..16).map(|_| Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0..1.0))).collect();
    let masks: Vec<Array2<bool>> = (0..16)
        .map(|i| Array2::from_shape_fn((64, 64), |(y, x)| i % 2 == 0 && (20..30).contains(&y) && (10..25).contains(&x)))
        .collect();
    let config = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };

    let mut g = c.benchmark_group("score_image");
    for threads in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| exec::with_threads(t, || multi_scale_score(&banks, &teacher, &image, ReferenceSize::square(64), None, FusionMode::Flat, 1e-12).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_epoch_64");
    g.sample_size(10);
    for threads in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| {
                exec::with_threads(t, || {
                    let mut bank = init_student_bank(&teacher, 64, 0).unwrap();
                    fit(&mut bank, &teacher, &train, &config, &mut |_, _| Ok(None)).unwrap()
                })
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_16x64x64");
    for threads in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| exec::with_threads(t, || evaluate(&maps, &masks, &MetricConfig::default()).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
