use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SceneDims};
use super::model::RegModel;
use super::vocab::TokenVocab;
use super::RegError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub dims: SceneDims,
    pub vocab: TokenVocab,
    pub noise: f64,
    pub best_epoch: usize,
    pub val_cider: f64,
    pub seed: u64,
}

pub fn save_model(model: &RegModel, meta: &CheckpointMeta, path: &Path) -> Result<(), RegError> {
    if meta.config != model.config || meta.dims != model.dims || meta.vocab != model.vocab {
        return Err(RegError::Config("checkpoint metadata does not describe this model".into()));
    }
    let value = serde_json::to_value(meta)?;
    scenereg_nn::save_checkpoint(&model.params, &value, path)?;
    Ok(())
}

/// Loads a model and checks its tensors against the architecture the
/// metadata describes.
pub fn load_model(path: &Path) -> Result<(RegModel, CheckpointMeta), RegError> {
    let (params, value) = scenereg_nn::load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(value)?;
    let fresh = RegModel::new(meta.config.clone(), meta.dims, meta.vocab.clone(), 0)?;
    let expected: Vec<(&String, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let found: Vec<(&String, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != found {
        return Err(RegError::Config(format!("{}: tensors do not match the stored architecture", path.display())));
    }
    let model = RegModel {
        params,
        ..fresh
    };
    Ok((model, meta))
}

/// Reads only the metadata block.
pub fn read_model_meta(path: &Path) -> Result<CheckpointMeta, RegError> {
    Ok(serde_json::from_value(scenereg_nn::read_checkpoint_meta(path)?)?)
}
