use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use scenereg_core::features::Variant;
use scenereg_core::regmodel::{Family, ModelConfig, TrainHyper};
use scenereg_core::sceneworld::{DatasetMode, SplitName, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_json, HarnessError, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SCENEREG_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySettings {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// Architecture and optimiser settings per model family; the variant
    /// field of each model config is set per matrix entry.
    #[serde(default = "default_families")]
    pub families: BTreeMap<Family, FamilySettings>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_noise")]
    pub noise_levels: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_splits")]
    pub eval_splits: Vec<SplitName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_families() -> BTreeMap<Family, FamilySettings> {
    let mut m = BTreeMap::new();
    m.insert(
        Family::Encdec,
        FamilySettings {
            model: ModelConfig {
                context_patch: 4,
                ..ModelConfig::default()
            },
            train: TrainHyper::default(),
        },
    );
    m
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

fn default_noise() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}

fn default_repeats() -> usize {
    10
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_splits() -> Vec<SplitName> {
    vec![SplitName::TestA, SplitName::TestB]
}

/// What an entry's results depend on besides its matrix coordinates.
#[derive(Serialize)]
struct Hashed<'a> {
    world: &'a WorldConfig,
    families: &'a BTreeMap<Family, FamilySettings>,
    repeats: usize,
    eval_splits: &'a [SplitName],
}

impl ExperimentConfig {
    /// Desk-scale default: ≈3k training scenes, all variants, three noise
    /// levels, the encoder-decoder family.
    pub fn desk_scale(mode: DatasetMode, master_seed: u64) -> Self {
        Self {
            world: WorldConfig::builtin(
                mode,
                [
                    (SplitName::Train, 3000),
                    (SplitName::Val, 200),
                    (SplitName::TestA, 500),
                    (SplitName::TestB, 500),
                ],
                master_seed,
            ),
            families: default_families(),
            variants: default_variants(),
            noise_levels: default_noise(),
            repeats: default_repeats(),
            seeds: default_seeds(),
            eval_splits: default_splits(),
            output_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if let Some(n) = self.noise_levels.iter().find(|n| !(0.0..=1.0).contains(*n)) {
            return bad(format!("noise level {n} outside [0,1]"));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.families.is_empty() || self.variants.is_empty() || self.noise_levels.is_empty() || self.seeds.is_empty() {
            return bad("families, variants, noise levels and seeds must be nonempty".into());
        }
        if self.eval_splits.is_empty() {
            return bad("no evaluation splits".into());
        }
        if let Some(s) = self.eval_splits.iter().find(|s| self.world.split_sizes.get(s).copied().unwrap_or(0) == 0) {
            return bad(format!("evaluation split {s} is empty"));
        }
        self.world.validate()?;
        Ok(())
    }

    /// Short hash of everything that determines an entry's results other
    /// than its (family, variant, noise, seed) coordinates, so growing the
    /// matrix reuses finished entries.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&Hashed {
            world: &self.world,
            families: &self.families,
            repeats: self.repeats,
            eval_splits: &self.eval_splits,
        })
        .expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Matrix entries in family, variant, noise, seed order.
    pub fn entries(&self) -> Vec<EntryKey> {
        let mut out = Vec::new();
        for &family in self.families.keys() {
            for &variant in &self.variants {
                for &noise in &self.noise_levels {
                    for &seed in &self.seeds {
                        out.push(EntryKey {
                            family,
                            variant,
                            noise,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn model_config(&self, key: &EntryKey) -> Result<(ModelConfig, TrainHyper)> {
        let s = self
            .families
            .get(&key.family)
            .ok_or_else(|| HarnessError::Config(format!("family {} not configured", key.family)))?;
        Ok((
            ModelConfig {
                family: key.family,
                variant: key.variant,
                ..s.model.clone()
            },
            s.train.clone(),
        ))
    }

    /// `--out`, then the config's own directory, then the environment, then
    /// `runs`.
    pub fn output_root(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryKey {
    pub family: Family,
    pub variant: Variant,
    pub noise: f64,
    pub seed: u64,
}

impl EntryKey {
    /// `<family>-<variant>`
    pub fn system(&self) -> String {
        format!("{}-{}", self.family, self.variant)
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}-{:.2}-{}", self.family, self.variant, self.noise, self.seed)
    }
}

impl fmt::Display for EntryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}
