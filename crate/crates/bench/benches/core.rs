//! Hot paths of a training step: matmul, attention, crop geometry and a
//! full desk-scale step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use cim_core::app::synthetic::{gen_synthetic, SyntheticSpec};
use cim_core::geometry::{extract_exemplar, rasterize_correlation, sample_crop_params, CropConfig, Image};
use cim_core::nn;
use cim_core::tensor::Tape;
use cim_core::trainer::{ModelConfig, TrainConfig, TrainState};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = nn::normal(&[n, n], 1.0, &mut rng);
        let b = nn::normal(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // desk shape: 64 context queries over 16 exemplar keys, width 64
    let q = nn::normal(&[8, 64, 64], 1.0, &mut rng);
    let k = nn::normal(&[8, 16, 64], 1.0, &mut rng);
    let v = nn::normal(&[8, 16, 64], 1.0, &mut rng);
    c.bench_function("attention_fwd_bwd", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (q, k, v) = (tape.leaf(q.clone(), true).unwrap(), tape.leaf(k.clone(), true).unwrap(), tape.leaf(v.clone(), true).unwrap());
            let a = nn::attention(&tape, q, k, v, 4).unwrap();
            let s = tape.sum(a).unwrap();
            tape.backward(s).unwrap();
            black_box(tape.len())
        })
    });
}

fn bench_geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = CropConfig::default();
    let params: Vec<_> = (0..64).map(|_| sample_crop_params(64, &cfg, &mut rng).unwrap()).collect();
    let context = Image::from_fn(64, 64, |ch, y, x| ((x * 3 + y * 5 + ch) % 11) as f64 / 10.0);
    c.bench_function("rasterize_correlation_m64", |bench| {
        bench.iter(|| params.iter().map(|p| rasterize_correlation(p, 64).ones()).sum::<usize>())
    });
    c.bench_function("extract_exemplar_n32", |bench| {
        bench.iter(|| params.iter().map(|p| extract_exemplar(&context, p, 32).unwrap().width()).sum::<usize>())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let mut state = TrainState::new(ModelConfig::default(), TrainConfig::default()).unwrap();
    let data = gen_synthetic(&SyntheticSpec { count: 8, ..Default::default() }, 3);
    let batches = state.sample_batches(&data.images).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("desk_default_step", |bench| bench.iter(|| black_box(state.train_step(&batches).unwrap())));
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_attention, bench_geometry, bench_train_step);
criterion_main!(benches);
