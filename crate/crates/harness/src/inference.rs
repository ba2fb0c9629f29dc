use std::collections::BTreeMap;

use scenereg_core::evalmetrics::{bleu_n, cider, judge_type, JudgeLexicon, JudgmentCategory, Tokens};
use scenereg_core::features::{NoiseSpec, Variant};
use scenereg_core::regmodel::{eval_noise_seed, sample_inputs, AttentionTrace, Family, Prediction, RegModel};
use scenereg_core::sceneworld::{Sample, SplitName};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const DECODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub cider: f64,
}

impl Scores {
    pub fn of(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<Self> {
        Ok(Self {
            bleu1: bleu_n(candidates, references, 1)?,
            bleu2: bleu_n(candidates, references, 2)?,
            cider: cider(candidates, references)?,
        })
    }

    /// Arithmetic mean, summed in order.
    pub fn mean(items: &[Scores]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let m = |f: fn(&Scores) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self {
            bleu1: m(|s| s.bleu1),
            bleu2: m(|s| s.bleu2),
            cider: m(|s| s.cider),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedScores {
    pub mean: Scores,
    pub per_repeat: Vec<Scores>,
}

impl AveragedScores {
    pub fn from_repeats(per_repeat: Vec<Scores>) -> Result<Self> {
        let mean = Scores::mean(&per_repeat).ok_or_else(|| HarnessError::Config("no repeats".into()))?;
        Ok(Self { mean, per_repeat })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentTally {
    pub n: usize,
    pub counts: BTreeMap<JudgmentCategory, usize>,
    pub percent: BTreeMap<JudgmentCategory, f64>,
}

impl JudgmentTally {
    pub fn of(judgments: &[JudgmentCategory]) -> Self {
        let mut counts: BTreeMap<JudgmentCategory, usize> = JudgmentCategory::ALL.iter().map(|&c| (c, 0)).collect();
        for j in judgments {
            *counts.get_mut(j).expect("all categories present") += 1;
        }
        let n = judgments.len();
        let percent = counts
            .iter()
            .map(|(&c, &k)| (c, if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 }))
            .collect();
        Self { n, counts, percent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemJudgment {
    pub sample_id: String,
    pub category: JudgmentCategory,
}

/// Metrics and oracle judgments of one split across inference repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub metrics: AveragedScores,
    /// Judgments of the first repeat, the single-run protocol.
    pub judgments_run0: JudgmentTally,
    /// Category percentages averaged over repeats.
    pub judgments_mean: BTreeMap<JudgmentCategory, f64>,
    pub items_run0: Vec<ItemJudgment>,
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub split: SplitName,
    pub family: Family,
    pub variant: Variant,
    pub noise: f64,
    pub run: usize,
    pub tokens: Vec<String>,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<AttentionTrace>,
}

/// Greedy predictions for `samples` with the target noise of repeat `run`.
pub fn decode_run(
    model: &RegModel,
    samples: &[Sample],
    noise: f64,
    base_seed: u64,
    run: usize,
    with_trace: bool,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(DECODE_CHUNK) {
        let inputs = chunk
            .iter()
            .map(|s| sample_inputs(model, s, NoiseSpec::new(noise, eval_noise_seed(base_seed, run, &s.id))))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.extend(model.decode_inputs(&inputs, model.config.max_len, with_trace)?);
    }
    Ok(out)
}

/// Scores each repeat's candidates (`runs[r][i]` for sample `i`) and judges
/// them with the oracle.
pub fn evaluate_runs(samples: &[Sample], runs: &[Vec<Tokens>], lexicon: &JudgeLexicon) -> Result<SplitEval> {
    if runs.is_empty() {
        return Err(HarnessError::Config("no repeats".into()));
    }
    let refs: Vec<Vec<Tokens>> = samples.iter().map(Sample::reference_tokens).collect();
    let mut per_repeat = Vec::with_capacity(runs.len());
    let mut shares: Vec<BTreeMap<JudgmentCategory, f64>> = Vec::with_capacity(runs.len());
    let mut run0 = Vec::new();
    for (r, cands) in runs.iter().enumerate() {
        if cands.len() != samples.len() {
            return Err(HarnessError::Config(format!(
                "repeat {r} has {} predictions for {} samples",
                cands.len(),
                samples.len()
            )));
        }
        per_repeat.push(Scores::of(cands, &refs)?);
        let judged: Vec<JudgmentCategory> = samples
            .iter()
            .zip(cands)
            .map(|(s, c)| judge_type(c, &s.scene, s.target, lexicon).category)
            .collect();
        shares.push(JudgmentTally::of(&judged).percent);
        if r == 0 {
            run0 = judged;
        }
    }
    let n = shares.len() as f64;
    let judgments_mean = JudgmentCategory::ALL
        .iter()
        .map(|c| (*c, shares.iter().map(|s| s[c]).sum::<f64>() / n))
        .collect();
    Ok(SplitEval {
        metrics: AveragedScores::from_repeats(per_repeat)?,
        judgments_run0: JudgmentTally::of(&run0),
        judgments_mean,
        items_run0: samples
            .iter()
            .zip(&run0)
            .map(|(s, &category)| ItemJudgment {
                sample_id: s.id.clone(),
                category,
            })
            .collect(),
    })
}

/// Decodes `repeats` times, re-rolling target noise with a seed derived
/// from `base_seed` and the repeat index, and averages the metrics.
pub fn repeated_inference(
    model: &RegModel,
    samples: &[Sample],
    noise: f64,
    repeats: usize,
    base_seed: u64,
    lexicon: &JudgeLexicon,
) -> Result<(SplitEval, Vec<Vec<Prediction>>)> {
    let preds = (0..repeats)
        .map(|r| decode_run(model, samples, noise, base_seed, r, false))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<Vec<Tokens>> = preds
        .iter()
        .map(|run| run.iter().map(|p| p.tokens.clone()).collect())
        .collect();
    Ok((evaluate_runs(samples, &runs, lexicon)?, preds))
}
