use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lightcrl::data::generate_synthetic;
use lightcrl::model::init_parameters;
use lightcrl::objective::evaluate_loss;
use lightcrl::train::loss_and_grad;
use lightcrl::{FusionKind, Modality, ModelConfig, SyntheticSpec, Tensor};

const K: usize = 64;

fn batch() -> (Tensor<f32>, Tensor<f32>) {
    let set = generate_synthetic(&SyntheticSpec::standard(K, 0)).unwrap();
    let idx: Vec<usize> = (0..K).collect();
    set.batch(&idx)
}

fn unit_rows(k: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = lightcrl::rng::Rng::new(seed);
    let mut data: Vec<f32> = (0..k * d).map(|_| rng.normal() as f32).collect();
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(&[k, d], data).unwrap()
}

fn encode(c: &mut Criterion) {
    let (m1, _) = batch();
    let mut group = c.benchmark_group("encode_k64");
    for fusion in [FusionKind::Add, FusionKind::Concat, FusionKind::Attention] {
        let cfg = ModelConfig::desk(32, 48, fusion);
        let params = init_parameters::<f32>(&cfg, 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(fusion), |b| {
            b.iter(|| params.encode(black_box(&m1), Modality::First).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (m1, m2) = batch();
    let mut group = c.benchmark_group("loss_and_grad_k64");
    for fusion in [FusionKind::Add, FusionKind::Attention] {
        let cfg = ModelConfig::desk(32, 48, fusion);
        let mut params = init_parameters::<f32>(&cfg, 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(fusion), |b| {
            b.iter(|| {
                params.zero_grad();
                loss_and_grad(&mut params, black_box(&m1), black_box(&m2)).unwrap().total
            })
        });
    }
    group.finish();
}

fn objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("objective");
    for k in [16, 64, 256] {
        let a = unit_rows(k, 64, 1);
        let b = unit_rows(k, 64, 2);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bench, _| {
            bench.iter(|| evaluate_loss(black_box(&a), black_box(&b), 0.1f32).unwrap().total)
        });
    }
    group.finish();
}

criterion_group!(benches, encode, train_step, objective);
criterion_main!(benches);
