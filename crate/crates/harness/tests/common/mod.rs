#![allow(dead_code)]

use std::collections::BTreeMap;

use scenereg_core::features::Variant;
use scenereg_core::regmodel::{Family, ModelConfig, TrainHyper};
use scenereg_core::sceneworld::{DatasetMode, SplitName};
use scenereg_harness::{ExperimentConfig, FamilySettings};

pub fn mini_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 16,
        context_patch: 4,
        prefix_target: 2,
        prefix_context: 2,
        mapping_hidden: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn quick_train() -> TrainHyper {
    TrainHyper {
        max_epochs: 2,
        batch_size: 16,
        ..TrainHyper::default()
    }
}

/// Full 3 × 3 matrix over a few dozen scenes with two-epoch models.
pub fn tiny_config(world_seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_scale(DatasetMode::LocEnabled, world_seed);
    cfg.world.split_sizes = BTreeMap::from([
        (SplitName::Train, 48),
        (SplitName::Val, 8),
        (SplitName::TestA, 10),
        (SplitName::TestB, 10),
    ]);
    cfg.families = BTreeMap::from([(
        Family::Encdec,
        FamilySettings {
            model: mini_model(),
            train: quick_train(),
        },
    )]);
    cfg.variants = Variant::ALL.to_vec();
    cfg.noise_levels = vec![0.0, 0.5, 1.0];
    cfg.repeats = 3;
    cfg.seeds = vec![1];
    cfg
}
