use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::refs::{generate_references, DatasetMode, RefExpression};
use super::scene::{generate_scene, InstanceId, Scene, SceneTemplate};
use super::vocab::{CategoryVocabulary, Group, Kind};
use super::WorldError;
use crate::seed::{derive_seed, tag};

/// Minimum visible fraction of a box for its instance to be a target.
pub const MIN_TARGET_VISIBILITY: f64 = 0.25;
const SAMPLE_ATTEMPTS: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitName {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "testA")]
    TestA,
    #[serde(rename = "testB")]
    TestB,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::Val, SplitName::TestA, SplitName::TestB];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::TestA => "testA",
            SplitName::TestB => "testB",
        }
    }

    /// Target group restriction, if any.
    pub fn group(self) -> Option<Group> {
        match self {
            SplitName::TestA => Some(Group::A),
            SplitName::TestB => Some(Group::B),
            _ => None,
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| WorldError::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTemplate {
    pub template: SceneTemplate,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default = "CategoryVocabulary::builtin")]
    pub vocabulary: CategoryVocabulary,
    pub templates: Vec<WeightedTemplate>,
    pub width: usize,
    pub height: usize,
    pub mode: DatasetMode,
    pub split_sizes: BTreeMap<SplitName, usize>,
    pub master_seed: u64,
}

impl WorldConfig {
    /// Built-in vocabulary and templates at equal weight, 16×16 scenes.
    pub fn builtin(mode: DatasetMode, sizes: [(SplitName, usize); 4], master_seed: u64) -> Self {
        Self {
            vocabulary: CategoryVocabulary::builtin(),
            templates: SceneTemplate::builtin()
                .into_iter()
                .map(|template| WeightedTemplate { template, weight: 1.0 })
                .collect(),
            width: 16,
            height: 16,
            mode,
            split_sizes: sizes.into_iter().collect(),
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        self.vocabulary.validate()?;
        if self.templates.is_empty() {
            return Err(WorldError::Config("no templates".into()));
        }
        for t in &self.templates {
            t.template.validate(&self.vocabulary)?;
            if t.weight < 0.0 || !t.weight.is_finite() {
                return Err(WorldError::Config(format!("template `{}` weight {}", t.template.name, t.weight)));
            }
        }
        if !self.templates.iter().any(|t| t.weight > 0.0) {
            return Err(WorldError::Config("no template has positive weight".into()));
        }
        for (&split, &n) in &self.split_sizes {
            if n == 0 {
                continue;
            }
            if let Some(g) = split.group() {
                let reachable = self.templates.iter().filter(|t| t.weight > 0.0).any(|t| {
                    t.template.category_weights.iter().any(|(name, w)| {
                        *w > 0.0
                            && self
                                .vocabulary
                                .by_name(name)
                                .is_some_and(|c| c.group == g && c.kind == Kind::Thing)
                    })
                });
                if !reachable {
                    return Err(WorldError::Config(format!(
                        "split {split} needs group {g:?} targets but no template produces any"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub scene: Scene,
    pub target: InstanceId,
    pub references: Vec<RefExpression>,
    pub flagged: bool,
}

impl Sample {
    pub fn target_instance(&self) -> &super::scene::Instance {
        self.scene.instance(self.target).expect("sample target exists")
    }

    pub fn reference_tokens(&self) -> Vec<Vec<String>> {
        self.references.iter().map(|r| r.tokens.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: CategoryVocabulary,
    pub mode: DatasetMode,
    pub splits: BTreeMap<SplitName, Vec<Sample>>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        self.splits.get(&name).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub samples: usize,
    pub flagged: usize,
    /// Target category (canonical name) → count.
    pub target_categories: BTreeMap<String, usize>,
    /// Instance category → count over all instances in the split's scenes.
    pub instance_categories: BTreeMap<String, usize>,
    pub templates: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub splits: BTreeMap<SplitName, SplitSummary>,
}

impl DatasetSummary {
    pub fn of(ds: &Dataset) -> Self {
        let name = |id: u16| ds.vocabulary.categories[id as usize].canonical_name.clone();
        let splits = ds
            .splits
            .iter()
            .map(|(&split, samples)| {
                let mut s = SplitSummary {
                    samples: samples.len(),
                    ..SplitSummary::default()
                };
                for smp in samples {
                    s.flagged += smp.flagged as usize;
                    *s.target_categories.entry(name(smp.target_instance().category)).or_default() += 1;
                    *s.templates.entry(smp.scene.template_name.clone()).or_default() += 1;
                    for inst in &smp.scene.instances {
                        *s.instance_categories.entry(name(inst.category)).or_default() += 1;
                    }
                }
                (split, s)
            })
            .collect();
        Self { splits }
    }
}

/// Generates every split. Sample `i` of a split draws attempt seeds
/// `derive_seed(master, [tag(split), i, attempt])` until its scene has an
/// eligible target; the template, scene, target choice and references all
/// come from streams derived from that seed.
pub fn build_dataset(config: &WorldConfig) -> Result<(Dataset, DatasetSummary), WorldError> {
    config.validate()?;
    let vocab = &config.vocabulary;
    let weights: Vec<f64> = config.templates.iter().map(|t| t.weight).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| WorldError::Config(e.to_string()))?;

    let mut splits = BTreeMap::new();
    for (&split, &n) in &config.split_sizes {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            samples.push(build_sample(config, &pick, split, i)?);
        }
        splits.insert(split, samples);
    }
    let ds = Dataset {
        vocabulary: vocab.clone(),
        mode: config.mode,
        splits,
    };
    let summary = DatasetSummary::of(&ds);
    Ok((ds, summary))
}

fn build_sample(
    config: &WorldConfig,
    pick: &WeightedIndex<f64>,
    split: SplitName,
    index: usize,
) -> Result<Sample, WorldError> {
    let vocab = &config.vocabulary;
    for attempt in 0..SAMPLE_ATTEMPTS {
        let seed = derive_seed(config.master_seed, &[tag(split.as_str()), index as u64, attempt]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = &config.templates[pick.sample(&mut rng)].template;
        let scene = generate_scene(template, vocab, (config.width, config.height), derive_seed(seed, &[1]))?;
        let eligible: Vec<InstanceId> = scene
            .instances
            .iter()
            .filter(|inst| {
                let c = &vocab.categories[inst.category as usize];
                split.group().map_or(true, |g| c.group == g)
                    && scene.visibility(inst.instance_id) >= MIN_TARGET_VISIBILITY
            })
            .map(|inst| inst.instance_id)
            .collect();
        let Some(&target) = eligible.choose(&mut rng) else { continue };
        let refs = generate_references(&scene, vocab, target, config.mode, derive_seed(seed, &[2]))?;
        return Ok(Sample {
            id: format!("{split}-{index:06}"),
            scene,
            target,
            references: refs.expressions,
            flagged: refs.flagged,
        });
    }
    Err(WorldError::Config(format!(
        "no eligible target for {split} sample {index} after {SAMPLE_ATTEMPTS} scenes"
    )))
}
