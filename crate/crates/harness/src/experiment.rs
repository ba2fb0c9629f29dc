use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use scenereg_core::analysis::{
    allocation_from_trace, category_attention, coverage_of_target_class, point_biserial, AnalysisError,
    AttentionAllocation, CorrelationResult, Scope,
};
use scenereg_core::evalmetrics::{JudgeLexicon, JudgmentCategory, Tokens};
use scenereg_core::features::Variant;
use scenereg_core::regmodel::{
    load_model, save_model, train, CheckpointMeta, Family, RegModel, TrainLog,
};
use scenereg_core::sceneworld::{
    build_dataset, load_dataset_with_vocabulary, save_dataset, Dataset, Sample, SplitName,
};
use scenereg_core::seed::{derive_seed, tag};
use serde::{Deserialize, Serialize};

use crate::annotate::HumanEval;
use crate::config::{EntryKey, ExperimentConfig};
use crate::error::{io_err, read_json, write_atomic, write_json, HarnessError, Result};
use crate::inference::{decode_run, evaluate_runs, PredictionRecord, SplitEval};

const CHECKPOINT: &str = "model.ckpt";
const TRAIN_LOG: &str = "train_log.json";
const PREDICTIONS: &str = "predictions.jsonl";
const METRICS: &str = "metrics.json";
const ANALYSIS: &str = "analysis.json";
const ENTRY: &str = "entry.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOutcome {
    pub result: Option<CorrelationResult>,
    /// Why no correlation could be computed.
    pub undefined: Option<String>,
}

/// Split means of per-sample attention measurements (encoder-decoder
/// models with a context span).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub n: usize,
    pub encoder: AttentionAllocation,
    pub decoder: AttentionAllocation,
    /// Mean attention share on cells of the target's category; visual
    /// context only.
    pub alpha_tgt_encoder: Option<f64>,
    pub alpha_tgt_decoder: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAnalysis {
    pub correlation: CorrelationOutcome,
    pub attention: Option<AttentionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub eval: SplitEval,
    pub analysis: SplitAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EntryStatus {
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub key: EntryKey,
    pub config_hash: String,
    #[serde(flatten)]
    pub status: EntryStatus,
    /// Relative to the run directory.
    pub checkpoint: Option<String>,
    pub train_log: Option<TrainLog>,
    pub splits: BTreeMap<SplitName, SplitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human: Option<HumanEval>,
}

impl EntryRecord {
    pub fn is_completed(&self) -> bool {
        self.status == EntryStatus::Completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub entries: Vec<EntryRecord>,
}

impl RunRecord {
    pub fn entry(&self, key: &EntryKey) -> Option<&EntryRecord> {
        self.entries.iter().find(|e| e.key == *key)
    }

    pub fn completed(&self) -> impl Iterator<Item = &EntryRecord> {
        self.entries.iter().filter(|e| e.is_completed())
    }
}

/// An experiment bound to its run directory and dataset.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    /// `<output root>/<config hash>`
    pub root: PathBuf,
    pub dataset: Dataset,
    lexicon: JudgeLexicon,
}

impl Experiment {
    /// Validates the config and loads the run's dataset, building and
    /// saving it on first use.
    pub fn open(config: ExperimentConfig, out_root: &Path) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let root = out_root.join(&hash);
        let data_dir = root.join("dataset");
        let dataset = if data_dir.join("meta.json").exists() {
            load_dataset_with_vocabulary(&data_dir, &config.world.vocabulary)?
        } else {
            info!("building dataset in {}", data_dir.display());
            let (ds, _) = build_dataset(&config.world)?;
            save_dataset(&ds, &data_dir)?;
            ds
        };
        write_json(&root.join("config.json"), &config)?;
        let lexicon = JudgeLexicon::from_vocabulary(&dataset.vocabulary);
        Ok(Self {
            config,
            hash,
            root,
            dataset,
            lexicon,
        })
    }

    pub fn entry_dir(&self, key: &EntryKey) -> PathBuf {
        self.root.join(key.dir_name())
    }

    fn split(&self, name: SplitName) -> &[Sample] {
        self.dataset.split(name)
    }

    pub fn train_seed(key: &EntryKey) -> u64 {
        derive_seed(
            key.seed,
            &[tag("train"), tag(key.family.as_str()), tag(key.variant.as_str()), key.noise.to_bits()],
        )
    }

    /// Noise seed base shared by all systems of one seed, so they face the
    /// same perturbations.
    pub fn eval_seed(key: &EntryKey) -> u64 {
        derive_seed(key.seed, &[tag("eval")])
    }

    /// Trains the entry's model, or loads it when already trained.
    pub fn train(&self, key: &EntryKey) -> Result<(RegModel, TrainLog)> {
        let dir = self.entry_dir(key);
        let (ckpt, log_path) = (dir.join(CHECKPOINT), dir.join(TRAIN_LOG));
        if ckpt.exists() && log_path.exists() {
            let (model, _) = load_model(&ckpt)?;
            return Ok((model, read_json(&log_path)?));
        }
        let (model_cfg, hyper) = self.config.model_config(key)?;
        info!("training {key}");
        let (model, log) = train(&model_cfg, &self.dataset, key.noise, &hyper, Self::train_seed(key))?;
        let meta = CheckpointMeta {
            config: model.config.clone(),
            dims: model.dims,
            vocab: model.vocab.clone(),
            noise: key.noise,
            best_epoch: log.best_epoch,
            val_cider: log.best_val_cider,
            seed: key.seed,
        };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_model(&model, &meta, &ckpt)?;
        write_json(&log_path, &log)?;
        Ok((model, log))
    }

    /// An already trained model; errors instead of training.
    pub fn trained(&self, key: &EntryKey) -> Result<(RegModel, TrainLog)> {
        let dir = self.entry_dir(key);
        if !dir.join(TRAIN_LOG).exists() {
            return Err(HarnessError::MissingEntry(format!("{key} (not trained)")));
        }
        self.train(key)
    }

    /// Stored predictions of an entry.
    pub fn predictions(&self, key: &EntryKey) -> Result<BTreeMap<SplitName, Vec<Vec<Tokens>>>> {
        let path = self.entry_dir(key).join(PREDICTIONS);
        if !path.exists() {
            return Err(HarnessError::MissingEntry(format!("{key} (no predictions)")));
        }
        self.read_predictions(&path)
    }

    /// Stored evaluation of an entry.
    pub fn evaluation(&self, key: &EntryKey) -> Result<BTreeMap<SplitName, SplitEval>> {
        let path = self.entry_dir(key).join(METRICS);
        if !path.exists() {
            return Err(HarnessError::MissingEntry(format!("{key} (not evaluated)")));
        }
        read_json(&path)
    }

    /// Candidates per split and repeat, from the prediction dump when
    /// present.
    pub fn infer(&self, key: &EntryKey, model: &RegModel) -> Result<BTreeMap<SplitName, Vec<Vec<Tokens>>>> {
        let path = self.entry_dir(key).join(PREDICTIONS);
        if path.exists() {
            return self.read_predictions(&path);
        }
        info!("inference {key}");
        let mut out = BTreeMap::new();
        let mut dump = String::new();
        for &split in &self.config.eval_splits {
            let samples = self.split(split);
            let mut runs = Vec::with_capacity(self.config.repeats);
            for run in 0..self.config.repeats {
                let preds = decode_run(model, samples, key.noise, Self::eval_seed(key), run, false)?;
                for (s, p) in samples.iter().zip(&preds) {
                    let rec = PredictionRecord {
                        sample_id: s.id.clone(),
                        split,
                        family: key.family,
                        variant: key.variant,
                        noise: key.noise,
                        run,
                        tokens: p.tokens.clone(),
                        truncated: p.truncated,
                        trace: None,
                    };
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    writeln!(dump, "{line}").expect("string write");
                }
                runs.push(preds.into_iter().map(|p| p.tokens).collect());
            }
            out.insert(split, runs);
        }
        write_atomic(&path, dump.as_bytes())?;
        Ok(out)
    }

    fn read_predictions(&self, path: &Path) -> Result<BTreeMap<SplitName, Vec<Vec<Tokens>>>> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut out: BTreeMap<SplitName, Vec<Vec<Tokens>>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let rec: PredictionRecord = serde_json::from_str(line).map_err(|source| HarnessError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            let runs = out.entry(rec.split).or_default();
            if runs.len() <= rec.run {
                runs.resize(rec.run + 1, Vec::new());
            }
            let run = &mut runs[rec.run];
            let expected = self.split(rec.split).get(run.len()).map(|s| s.id.as_str());
            if expected != Some(rec.sample_id.as_str()) {
                return Err(HarnessError::Config(format!(
                    "{}:{}: prediction for {} out of dataset order",
                    path.display(),
                    i + 1,
                    rec.sample_id
                )));
            }
            run.push(rec.tokens);
        }
        for &split in &self.config.eval_splits {
            let n = self.split(split).len();
            let ok = out
                .get(&split)
                .is_some_and(|runs| runs.len() == self.config.repeats && runs.iter().all(|r| r.len() == n));
            if !ok {
                return Err(HarnessError::Config(format!("{}: incomplete predictions for {split}", path.display())));
            }
        }
        Ok(out)
    }

    pub fn evaluate(
        &self,
        key: &EntryKey,
        runs: &BTreeMap<SplitName, Vec<Vec<Tokens>>>,
    ) -> Result<BTreeMap<SplitName, SplitEval>> {
        let path = self.entry_dir(key).join(METRICS);
        if path.exists() {
            return read_json(&path);
        }
        let mut out = BTreeMap::new();
        for &split in &self.config.eval_splits {
            let r = runs
                .get(&split)
                .ok_or_else(|| HarnessError::Config(format!("no predictions for {split}")))?;
            out.insert(split, evaluate_runs(self.split(split), r, &self.lexicon)?);
        }
        write_json(&path, &out)?;
        Ok(out)
    }

    /// Adequacy/coverage correlation and attention allocation per split.
    pub fn analyze(
        &self,
        key: &EntryKey,
        model: &RegModel,
        evals: &BTreeMap<SplitName, SplitEval>,
    ) -> Result<BTreeMap<SplitName, SplitAnalysis>> {
        let path = self.entry_dir(key).join(ANALYSIS);
        if path.exists() {
            return read_json(&path);
        }
        let mut out = BTreeMap::new();
        for &split in &self.config.eval_splits {
            let samples = self.split(split);
            let eval = evals
                .get(&split)
                .ok_or_else(|| HarnessError::Config(format!("no evaluation for {split}")))?;
            let correlation = correlate(samples, eval)?;
            let attention = if key.family == Family::Encdec && key.variant != Variant::Tgt {
                Some(self.attention(key, model, samples)?)
            } else {
                None
            };
            out.insert(split, SplitAnalysis { correlation, attention });
        }
        write_json(&path, &out)?;
        Ok(out)
    }

    fn attention(&self, key: &EntryKey, model: &RegModel, samples: &[Sample]) -> Result<AttentionSummary> {
        let k = model.dims.categories;
        let (mut enc, mut dec) = (Vec::new(), Vec::new());
        let (mut tgt_enc, mut tgt_dec) = (Vec::new(), Vec::new());
        for chunk in samples.chunks(32) {
            let preds = decode_run(model, chunk, key.noise, Self::eval_seed(key), 0, true)?;
            for (s, p) in chunk.iter().zip(preds) {
                let trace = p.trace.expect("trace requested");
                enc.push(allocation_from_trace(&trace, Scope::Encoder)?);
                dec.push(allocation_from_trace(&trace, Scope::Decoder)?);
                if key.variant == Variant::Vis {
                    tgt_enc.push(category_attention(&trace, &s.scene, s.target, k, Scope::Encoder)?.alpha_target_class);
                    tgt_dec.push(category_attention(&trace, &s.scene, s.target, k, Scope::Decoder)?.alpha_target_class);
                }
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok(AttentionSummary {
            n: enc.len(),
            encoder: AttentionAllocation::mean(&enc)?,
            decoder: AttentionAllocation::mean(&dec)?,
            alpha_tgt_encoder: mean(&tgt_enc),
            alpha_tgt_decoder: mean(&tgt_dec),
        })
    }

    fn run_stages(&self, key: &EntryKey) -> Result<EntryRecord> {
        let (model, log) = self.train(key)?;
        let runs = self.infer(key, &model)?;
        let evals = self.evaluate(key, &runs)?;
        let mut analyses = self.analyze(key, &model, &evals)?;
        let splits = evals
            .into_iter()
            .map(|(split, eval)| {
                let analysis = analyses.remove(&split).expect("analysis covers every split");
                (split, SplitResult { eval, analysis })
            })
            .collect();
        Ok(EntryRecord {
            key: *key,
            config_hash: self.hash.clone(),
            status: EntryStatus::Completed,
            checkpoint: Some(format!("{}/{CHECKPOINT}", key.dir_name())),
            train_log: Some(log),
            splits,
            human: None,
        })
    }

    /// Previously recorded outcome of an entry.
    pub fn load_entry(&self, key: &EntryKey) -> Result<Option<EntryRecord>> {
        let path = self.entry_dir(key).join(ENTRY);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn save_entry(&self, rec: &EntryRecord) -> Result<()> {
        write_json(&self.entry_dir(&rec.key).join(ENTRY), rec)
    }

    /// Completes one entry; completed entries are loaded, failures are
    /// recorded rather than returned.
    pub fn run_entry(&self, key: &EntryKey) -> Result<EntryRecord> {
        if let Some(rec) = self.load_entry(key)? {
            if rec.is_completed() {
                return Ok(rec);
            }
        }
        let rec = self.run_stages(key).unwrap_or_else(|e| {
            warn!("entry {key} failed: {e}");
            EntryRecord {
                key: *key,
                config_hash: self.hash.clone(),
                status: EntryStatus::Failed { error: e.to_string() },
                checkpoint: None,
                train_log: None,
                splits: BTreeMap::new(),
                human: None,
            }
        });
        self.save_entry(&rec)?;
        Ok(rec)
    }

    pub fn run(&self) -> Result<RunRecord> {
        let entries = self
            .config
            .entries()
            .iter()
            .map(|k| self.run_entry(k))
            .collect::<Result<Vec<_>>>()?;
        self.finish(entries)
    }

    /// Record of already finished entries; errors if any is missing.
    pub fn collect(&self) -> Result<RunRecord> {
        let entries = self
            .config
            .entries()
            .iter()
            .map(|k| self.load_entry(k)?.ok_or_else(|| HarnessError::MissingEntry(k.dir_name())))
            .collect::<Result<Vec<_>>>()?;
        self.finish(entries)
    }

    fn finish(&self, entries: Vec<EntryRecord>) -> Result<RunRecord> {
        let record = RunRecord {
            config_hash: self.hash.clone(),
            config: self.config.clone(),
            entries,
        };
        write_json(&self.root.join("run_record.json"), &record)?;
        Ok(record)
    }
}

fn correlate(samples: &[Sample], eval: &SplitEval) -> Result<CorrelationOutcome> {
    if eval.items_run0.len() != samples.len() {
        return Err(HarnessError::Config("judgments do not cover the split".into()));
    }
    let adequate: Vec<bool> = eval
        .items_run0
        .iter()
        .map(|j| j.category == JudgmentCategory::A)
        .collect();
    let coverage = samples
        .iter()
        .map(|s| coverage_of_target_class(&s.scene, s.target))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(match point_biserial(&adequate, &coverage) {
        Ok(r) => CorrelationOutcome {
            result: Some(r),
            undefined: None,
        },
        Err(AnalysisError::UndefinedCorrelation(why)) => CorrelationOutcome {
            result: None,
            undefined: Some(why),
        },
        Err(e) => return Err(e.into()),
    })
}

/// Runs (or resumes) the whole matrix of `config` under `out_root`.
pub fn run_experiment(config: ExperimentConfig, out_root: &Path) -> Result<RunRecord> {
    Experiment::open(config, out_root)?.run()
}
