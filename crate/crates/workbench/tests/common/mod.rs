// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use csae_core::data::{generate_dataset, Dataset};
use csae_core::model::{train_target, TargetModel, TargetTrainConfig};
use csae_core::pipeline::{run_pipeline, PipelineConfig, SaeCheckpoint, StageConfig};

pub fn tiny_config() -> PipelineConfig {
    let stage = StageConfig {
        lr: 1e-3,
        lr_step: None,
        lr_gamma: 1.0,
        epochs: 1,
        batch_size: 16,
    };
    PipelineConfig {
        taps: vec![4, 7],
        embed_dim: 4,
        hidden_dim: 4,
        free_tokens: 3,
        tokenizer: stage,
        aggregator: stage,
        free: stage,
        ..PipelineConfig::default()
    }
}

pub struct Fixture {
    pub data: Dataset,
    pub model: TargetModel,
    pub ckpt: SaeCheckpoint,
}

/// A quickly trained model and all-stage checkpoint on 64 images.
pub fn fixture() -> Fixture {
    let data = generate_dataset(3, 64);
    let (model, _) = train_target(
        &data,
        &TargetTrainConfig {
            epochs: 1,
            ..TargetTrainConfig::default()
        },
    )
    .unwrap();
    let ckpt = run_pipeline(&data, &model, &tiny_config()).map_err(|f| f.error).unwrap();
    Fixture { data, model, ckpt }
}
