use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use eegfm::attention::masked_mha;
use eegfm::autograd::Tape;
use eegfm::losses::LossWeights;
use eegfm::spectral::psd_log;
use eegfm::train::pretrain_loss;
use eegfm::{AdditiveMask, Mat, Model, ModelConfig, TaskKind};
use eegfm_bench::synth_batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spectral(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let patch: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("psd_log 256", |b| b.iter(|| psd_log(black_box(&patch)).unwrap()));
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d) = (64, 64);
    let mut m = |r, k| Mat::from_shape_fn((r, k), |_| rng.random_range(-1.0..1.0));
    let (q, k, v, w) = (m(n, d), m(n, d), m(n, d), m(d, d));
    let mask = AdditiveMask::from_fn(n, n, |i, j| j <= i);
    c.bench_function("masked_mha 64x64 causal", |b| {
        b.iter(|| masked_mha(black_box(&q), &k, &v, &mask, 4, &w).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let batch = synth_batch(4, 6, 8);
    let mut g = c.benchmark_group("tiny model");
    g.sample_size(20);
    for kind in [TaskKind::Gpt, TaskKind::MaeTp, TaskKind::MaeCh] {
        g.bench_function(format!("forward {kind}"), |b| {
            b.iter(|| model.pretrain_forward(black_box(&batch), kind, 7).unwrap())
        });
    }
    let plans = Model::sample_plans(&batch, TaskKind::MaeTp, 7).unwrap();
    let weights = LossWeights::default();
    g.bench_function("forward+backward mae-tp", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.store().bind(&mut tape);
            let loss = pretrain_loss(&model, &mut tape, &p, &batch, &plans, &weights).unwrap();
            tape.backward(loss.total)
        })
    });
    g.finish();
}

criterion_group!(benches, spectral, attention, model);
criterion_main!(benches);
