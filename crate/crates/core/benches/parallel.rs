//! Rayon against the sequential fallback on the two per-sample hot paths:
//! one training step over a batch and ranking a split.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drn_core::data::{synthesize_dataset, Split, SynthConfig};
use drn_core::eval::{rank_all, EvalConfig};
use drn_core::model::{Model, ModelConfig};
use drn_core::parallel::Parallelism;
use drn_core::train::{TrainConfig, TrainState, Trainer};

const MODES: [Parallelism; 2] = [Parallelism::Rayon, Parallelism::Sequential];

fn setup() -> (drn_core::data::Dataset, ModelConfig) {
    let ds = synthesize_dataset(&SynthConfig {
        train: 64,
        val: 0,
        test: 32,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut cfg = ModelConfig::default();
    cfg.interaction.vocab_size = ds.vocabulary.len();
    (ds, cfg)
}

fn training_step(c: &mut Criterion) {
    let (ds, cfg) = setup();
    let train = ds.split(Split::Train);
    let (model, store) = Model::new(cfg, 0).unwrap();
    let mut group = c.benchmark_group("training_step");
    group.sample_size(10);
    for mode in MODES {
        let tc = TrainConfig {
            parallelism: mode,
            validate: false,
            ..TrainConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter_batched(
                || TrainState::new(store.clone(), &tc, 0),
                |state| {
                    let mut t = Trainer::new(&model, &tc, &train, state).unwrap();
                    t.step().unwrap()
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let (ds, cfg) = setup();
    let test = ds.split(Split::Test);
    let (model, store) = Model::new(cfg, 0).unwrap();
    let ec = EvalConfig::default();
    let mut group = c.benchmark_group("rank_split");
    group.sample_size(10);
    for mode in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| rank_all(&model, &store, &test, &ec, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, training_step, ranking);
criterion_main!(benches);
