//! Referring-expression generators: an encoder-decoder and a prefix
//! decoder, each with target-only, visual-context and symbolic-context
//! inputs.

mod checkpoint;
mod config;
mod decode;
mod inputs;
mod model;
mod train;
mod vocab;

use thiserror::Error;

pub use checkpoint::{load_model, read_model_meta, save_model, CheckpointMeta};
pub use config::{Family, InputLayout, ModelConfig, SceneDims, Span, SpanKind};
pub use decode::{argmax, greedy_decode, Decoded, NextTokenModel};
pub use inputs::ModelInputs;
pub use model::{AttentionMap, AttentionTrace, ForwardOutput, LossFn, Prediction, RegModel, Stepper};
pub use train::{
    build_vocab, epoch_noise_seed, eval_noise_seed, fit, greedy_cider, sample_inputs, scene_dims, train,
    train_with_hook, EarlyStopping, EpochRecord, StopReason, TrainHyper, TrainLog,
};
pub use vocab::{TokenVocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum RegError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error(transparent)]
    Nn(#[from] scenereg_nn::NnError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Metric(#[from] crate::evalmetrics::MetricError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
