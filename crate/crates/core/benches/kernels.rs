use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use knn_attn::attention::{dense_attention, knn_attention_fast, knn_attention_slow, SelectionMetric};
use knn_attn::lemmas::{run_lemma3, Lemma3Config};
use knn_attn::vit::{batch_gradient, prepare, ModelConfig, TrainConfig};
use knn_attn::{Exec, RngStream};

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for &(n, d, k) in &[(64, 32, 32), (196, 64, 100)] {
        let mut rng = RngStream::new(0);
        let q = rng.normal_matrix(n, d, 1.0);
        let kk = rng.normal_matrix(n, d, 1.0);
        let v = rng.normal_matrix(n, d, 1.0);
        let id = format!("n{n}_d{d}_k{k}");
        group.bench_function(BenchmarkId::new("dense", &id), |b| {
            b.iter(|| dense_attention(black_box(&q), &kk, &v, 1.0).unwrap())
        });
        group.bench_function(BenchmarkId::new("knn_fast", &id), |b| {
            b.iter(|| knn_attention_fast(black_box(&q), &kk, &v, k, 1.0).unwrap())
        });
        group.bench_function(BenchmarkId::new("knn_slow", &id), |b| {
            b.iter(|| knn_attention_slow(black_box(&q), &kk, &v, k, SelectionMetric::Euclidean, 1.0).unwrap())
        });
    }
    group.finish();
}

fn executors(c: &mut Criterion) {
    let mut group = c.benchmark_group("exec");
    group.sample_size(10);
    let lemma = Lemma3Config {
        trials: 100,
        sigmas: vec![1.0],
        ..Default::default()
    };
    let (model, data) = prepare(&ModelConfig::default(), &TrainConfig::default()).unwrap();
    let batch: Vec<usize> = (0..32).collect();
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_function(BenchmarkId::new("lemma3_trials", name), |b| {
            b.iter(|| run_lemma3(&lemma, exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("batch_gradient", name), |b| {
            b.iter(|| batch_gradient(&model, &data.train, &batch, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernels, executors);
criterion_main!(benches);
