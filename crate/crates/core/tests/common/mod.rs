#![allow(dead_code)]

pub mod gradients;

use drn_core::data::{synthesize_dataset, Dataset, Sample, Split, SynthConfig};
use drn_core::model::ModelConfig;
use drn_core::train::TrainConfig;

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        train: 24,
        val: 8,
        test: 8,
        segments: 16,
        feature_dim: 8,
        event_words: 6,
        min_event_len: 2,
        max_event_len: 5,
        seed: 3,
        ..SynthConfig::default()
    }
}

pub fn tiny_model(ds: &Dataset) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    let i = &mut cfg.interaction;
    i.vocab_size = ds.vocabulary.len();
    i.segments = ds.segments;
    i.feature_dim = ds.feature_dim;
    i.word_dim = 6;
    i.hidden = 5;
    i.channels = 8;
    i.location_dim = 6;
    cfg
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: [2, 2, 2],
        batch_size: 8,
        validate: false,
        ..TrainConfig::default()
    }
}

pub struct Tiny {
    pub ds: Dataset,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub model: ModelConfig,
}

pub fn tiny() -> Tiny {
    let ds = synthesize_dataset(&tiny_synth()).unwrap();
    let model = tiny_model(&ds);
    Tiny {
        train: ds.split(Split::Train),
        val: ds.split(Split::Val),
        ds,
        model,
    }
}
