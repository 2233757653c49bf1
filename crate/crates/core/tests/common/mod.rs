#![allow(dead_code)]

pub mod oracles;

use linkrec::model::ModelConfig;
use linkrec::synth::{generate, SynthConfig, SyntheticCorpus};
use linkrec::trainer::TrainConfig;

/// A corpus and model small enough to train for a few epochs in well under a second.
pub fn small_synth(seed: u64) -> SyntheticCorpus {
    generate(&SynthConfig {
        papers: 120,
        repos: 80,
        users: 60,
        bridge_fraction: 0.2,
        abstract_words: 30,
        embedding_dim: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        embedding_dim: 16,
        abstract_len: 30,
        description_len: 20,
        paper_windows: vec![(2, 8), (3, 8)],
        repo_windows: vec![(2, 8), (3, 8)],
        tag_hidden: 8,
        gcn_hidden: 12,
        gcn_output: 12,
        ..Default::default()
    }
}

pub fn small_train() -> TrainConfig {
    TrainConfig {
        epochs_max: 4,
        ..Default::default()
    }
}
