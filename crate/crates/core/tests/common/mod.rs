#![allow(dead_code)]

use facelab::diffcore::ModelConfig;
use facelab::synthface::{make_pair_sized, IdentitySpec, TrainingPair};
use facelab::trainer::{PairData, TrainConfig};

/// `n` pairs of 16x16 renders cycling over `ids` reference identities.
pub fn tiny_pairs(n: usize, ids: u32, seed: u64) -> Vec<TrainingPair> {
    (0..n)
        .map(|i| make_pair_sized(&IdentitySpec::reference(i as u32 % ids), seed * 100_000 + i as u64, 16).unwrap())
        .collect()
}

pub fn tiny_data(n: usize, seed: u64) -> PairData {
    PairData::from_pairs(&tiny_pairs(n, 4, seed)).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        batch_size: 4,
        steps: 10,
        seed: 3,
        checkpoint_every: 3,
        log_every: 1,
        val_pairs: 8,
        ..TrainConfig::default()
    }
}

/// A 64x64 model small enough for fast end-to-end runs.
pub fn small64() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        conv_in_kernel: 1,
        ..ModelConfig::tiny()
    }
}
