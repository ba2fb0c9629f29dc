use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenereg_nn::{adam_step, AdamHyper, AdamState, Graph};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SceneDims};
use super::inputs::ModelInputs;
use super::model::RegModel;
use super::vocab::TokenVocab;
use super::RegError;
use crate::evalmetrics::cider;
use crate::features::{build_features, NoiseSpec};
use crate::sceneworld::{Dataset, Sample, SplitName};
use crate::seed::{derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without a new best val CIDEr before stopping.
    pub patience: usize,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f32>,
    /// Use only the first n validation samples for early stopping.
    pub val_limit: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 15,
            patience: 3,
            clip_norm: Some(1.0),
            val_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cider: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// The caller's epoch hook asked to stop.
    Hook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_cider: f64,
    pub stop_reason: StopReason,
}

/// Tracks the best score and counts epochs without a new maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records `score` for `epoch`; returns (improved, should_stop).
    pub fn update(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

pub fn scene_dims(dataset: &Dataset) -> Result<SceneDims, RegError> {
    let scene = &dataset
        .splits
        .values()
        .flatten()
        .next()
        .ok_or_else(|| RegError::EmptySplit("dataset".into()))?
        .scene;
    Ok(SceneDims {
        width: scene.width,
        height: scene.height,
        channels: dataset.vocabulary.channels(),
        categories: dataset.vocabulary.len(),
    })
}

pub fn build_vocab(train: &[Sample]) -> TokenVocab {
    TokenVocab::build(train.iter().flat_map(|s| s.references.iter().map(|r| r.tokens.as_slice())))
}

/// Model inputs for one sample under `noise`.
pub fn sample_inputs(model: &RegModel, sample: &Sample, noise: NoiseSpec) -> Result<ModelInputs, RegError> {
    let bundle = build_features(
        &sample.scene,
        sample.target,
        model.config.variant,
        noise,
        model.config.crop,
        model.dims.categories,
    )?;
    model.inputs(&bundle)
}

/// Noise seed of a training sample in a given epoch.
pub fn epoch_noise_seed(seed: u64, epoch: usize, sample_id: &str) -> u64 {
    derive_seed(seed, &[tag("train-noise"), epoch as u64, tag(sample_id)])
}

/// Noise seed of an evaluation sample in a given inference repeat.
pub fn eval_noise_seed(seed: u64, repeat: usize, sample_id: &str) -> u64 {
    derive_seed(seed, &[tag("eval-noise"), repeat as u64, tag(sample_id)])
}

/// Greedy CIDEr of `model` on `samples` with fixed per-sample noise.
pub fn greedy_cider(model: &RegModel, samples: &[Sample], noise: f64, seed: u64) -> Result<f64, RegError> {
    let mut cands = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let inputs = chunk
            .iter()
            .map(|s| sample_inputs(model, s, NoiseSpec::new(noise, eval_noise_seed(seed, 0, &s.id))))
            .collect::<Result<Vec<_>, _>>()?;
        cands.extend(model.decode_inputs(&inputs, model.config.max_len, false)?.into_iter().map(|p| p.tokens));
    }
    let refs: Vec<_> = samples.iter().map(Sample::reference_tokens).collect();
    Ok(cider(&cands, &refs)?)
}

/// Trains one model for one noise level on the train split, selecting the
/// epoch with the best validation CIDEr.
pub fn train(
    config: &ModelConfig,
    dataset: &Dataset,
    noise: f64,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(RegModel, TrainLog), RegError> {
    train_with_hook(config, dataset, noise, hyper, seed, &mut |_, _| false)
}

/// Like [`train`], calling `hook` after every epoch; returning true stops
/// training.
pub fn train_with_hook(
    config: &ModelConfig,
    dataset: &Dataset,
    noise: f64,
    hyper: &TrainHyper,
    seed: u64,
    hook: &mut dyn FnMut(&RegModel, &EpochRecord) -> bool,
) -> Result<(RegModel, TrainLog), RegError> {
    let train = dataset.split(SplitName::Train);
    let mut val = dataset.split(SplitName::Val);
    if train.is_empty() {
        return Err(RegError::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(RegError::EmptySplit("val".into()));
    }
    if let Some(n) = hyper.val_limit {
        val = &val[..n.min(val.len())];
    }
    if hyper.batch_size == 0 || hyper.max_epochs == 0 {
        return Err(RegError::Config("batch_size and max_epochs must be positive".into()));
    }
    let model = RegModel::new(
        config.clone(),
        scene_dims(dataset)?,
        build_vocab(train),
        derive_seed(seed, &[tag("init")]),
    )?;
    fit(model, train, val, noise, hyper, seed, hook)
}

/// Training loop over prepared samples.
pub fn fit(
    mut model: RegModel,
    train: &[Sample],
    val: &[Sample],
    noise: f64,
    hyper: &TrainHyper,
    seed: u64,
    hook: &mut dyn FnMut(&RegModel, &EpochRecord) -> bool,
) -> Result<(RegModel, TrainLog), RegError> {
    let encoded: Vec<Vec<Vec<usize>>> = train
        .iter()
        .map(|s| s.references.iter().map(|r| model.vocab.encode(&r.tokens)).collect())
        .collect();
    let max = model.config.max_tokens() + 1;
    if let Some(long) = encoded.iter().flatten().find(|e| e.len() > max) {
        return Err(RegError::SequenceTooLong { len: long.len() - 1, max: max - 1 });
    }
    let mut adam = AdamState::new(AdamHyper {
        lr: hyper.lr,
        ..AdamHyper::default()
    });
    let mut stopper = EarlyStopping::new(hyper.patience);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=hyper.max_epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag("order"), epoch as u64]));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut seqs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                inputs.push(sample_inputs(&model, s, NoiseSpec::new(noise, epoch_noise_seed(seed, epoch, &s.id)))?);
                // one reference per sample and epoch
                let refs = &encoded[i];
                seqs.push(refs[rng.gen_range(0..refs.len())].clone());
            }
            let refs: Vec<&ModelInputs> = inputs.iter().collect();
            let mut g = Graph::<f32>::training(derive_seed(seed, &[tag("dropout"), epoch as u64, bi as u64]));
            let loss = model.net().loss(&mut g, &model.params, &refs, &seqs)?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(RegError::NonFiniteLoss { epoch, batch: bi, loss: value });
            }
            g.backward(loss)?;
            let grads = g.param_grads();
            drop(g);
            let scale = clip_scale(&grads, hyper.clip_norm);
            model.params.accumulate_grads(&grads, scale)?;
            adam_step(&mut model.params, &mut adam)?;
            loss_sum += value;
            batches += 1;
        }
        let val_cider = greedy_cider(&model, val, noise, seed)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_cider,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        let (improved, stop) = stopper.update(epoch, val_cider);
        if improved {
            best = model.params.clone();
        }
        let hook_stop = hook(&model, &record);
        epochs.push(record);
        if hook_stop {
            stop_reason = StopReason::Hook;
            break;
        }
        if stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    model.params = best;
    for (_, t) in model.params.iter_mut() {
        t.grad = None;
    }
    Ok((
        model,
        TrainLog {
            epochs,
            best_epoch: stopper.best_epoch,
            best_val_cider: stopper.best,
            stop_reason,
        },
    ))
}

fn clip_scale(grads: &BTreeMap<String, Vec<f32>>, clip: Option<f32>) -> f32 {
    let Some(max) = clip else { return 1.0 };
    let norm = grads
        .values()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max as f64 {
        (max as f64 / norm) as f32
    } else {
        1.0
    }
}
