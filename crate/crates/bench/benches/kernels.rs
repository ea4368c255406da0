use std::hint::black_box;

use bcqforge_bench::{random_buffer, random_history, wis_fixture};
use bcqforge_core::bcq::{BcqConfig, PolicyBundle, QTrainer};
use bcqforge_core::cohort::preprocess;
use bcqforge_core::encoders::{Encoder, EncoderConfig, EncoderKind};
use bcqforge_core::nn::Tensor;
use bcqforge_core::ope::wis;
use bcqforge_core::sim::{generate_cohort, SimConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const STATE_DIM: usize = 64;

// ----------------------------------------------------------------------------
// Q-network
// ----------------------------------------------------------------------------

fn q_forward(c: &mut Criterion) {
    let bundle = PolicyBundle::new(BcqConfig { hidden: 128, ..Default::default() }, STATE_DIM).unwrap();
    let buffer = random_buffer(256, STATE_DIM, 1);
    let rows: Vec<&[f64]> = buffer.transitions().iter().map(|t| t.state.as_slice()).collect();
    let states = Tensor::from_rows(&rows).unwrap();
    c.bench_function("q_forward_256", |b| b.iter(|| bundle.q_values(black_box(&states)).unwrap()));
    c.bench_function("act_256", |b| b.iter(|| bundle.act(black_box(&states)).unwrap()));
}

fn bcq_step(c: &mut Criterion) {
    let buffer = random_buffer(5000, STATE_DIM, 2);
    let mut group = c.benchmark_group("bcq_step");
    for tau in [0.0, 0.3] {
        let config = BcqConfig { tau, hidden: 128, batch_size: 64, ..Default::default() };
        let mut bundle = PolicyBundle::new(config, STATE_DIM).unwrap();
        bundle.fit_behavior(&buffer).unwrap();
        let mut trainer = QTrainer::new(bundle, &buffer).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(tau), &tau, |b, _| b.iter(|| trainer.step().unwrap()));
    }
    group.finish();
}

// ----------------------------------------------------------------------------
// Encoders
// ----------------------------------------------------------------------------

fn encoders(c: &mut Criterion) {
    let (features, actions) = random_history(20, 40, 3);
    let mut group = c.benchmark_group("encode_20_bins");
    for kind in [EncoderKind::Rnn, EncoderKind::OdeRnn, EncoderKind::Cde] {
        let config = EncoderConfig { kind, hidden: STATE_DIM, head: vec![64, 64], step_count: 4, seed: 4 };
        let encoder = Encoder::new(config, 40).unwrap();
        group.bench_function(kind.name(), |b| b.iter(|| encoder.encode_all(black_box(&features), &actions).unwrap()));
    }
    group.finish();
}

// ----------------------------------------------------------------------------
// Evaluation and data
// ----------------------------------------------------------------------------

fn wis_estimate(c: &mut Criterion) {
    let f = wis_fixture(500, 19, 5);
    c.bench_function("wis_500x19", |b| b.iter(|| wis(black_box(&f.trajectories), &f.greedy, &f.mu, 1.0, 0.01).unwrap()));
}

fn cohort(c: &mut Criterion) {
    let config = SimConfig { patients: 200, seed: 6, ..SimConfig::default() };
    let sim = generate_cohort(&config).unwrap();
    c.bench_function("generate_200", |b| b.iter(|| generate_cohort(black_box(&config)).unwrap()));
    c.bench_function("preprocess_200", |b| b.iter(|| preprocess(black_box(&sim.raw), 7).unwrap()));
}

criterion_group!(benches, q_forward, bcq_step, encoders, wis_estimate, cohort);
criterion_main!(benches);
