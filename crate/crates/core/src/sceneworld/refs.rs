//! The world's expression grammar.
//!
//! An expression names exactly one type word, optionally a color word, and
//! (only in location-enabled datasets) optionally one location word. Its
//! meaning: among instances whose category owns the type word (and whose
//! color attribute matches, if given), the location word picks the unique
//! extreme box center in that direction. With a single candidate the
//! location word must also hold for the image half the box center lies in.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Instance, InstanceId, Scene};
use super::vocab::{CategoryId, CategoryVocabulary, LOCATION_WORDS};
use super::WorldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    LocEnabled,
    LocFree,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefExpression {
    pub tokens: Vec<String>,
    pub target_instance: InstanceId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub expressions: Vec<RefExpression>,
    /// Set when no modifier combination singles out the target and the
    /// type-only fallback was emitted.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Left,
    Right,
    Top,
    Bottom,
}

impl Location {
    pub const ALL: [Location; 4] = [Location::Left, Location::Right, Location::Top, Location::Bottom];

    pub fn word(self) -> &'static str {
        LOCATION_WORDS[self as usize]
    }

    pub fn parse(w: &str) -> Option<Self> {
        LOCATION_WORDS.iter().position(|l| *l == w).map(|i| Self::ALL[i])
    }
}

/// Parsed content of an expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Description {
    pub category: CategoryId,
    pub color: Option<String>,
    pub location: Option<Location>,
}

impl Description {
    /// Reads type, color and location words out of a token list. Returns
    /// `None` unless there is exactly one type word and at most one of
    /// each modifier.
    pub fn parse(tokens: &[String], vocab: &CategoryVocabulary) -> Option<Self> {
        let types = vocab.type_words();
        let mut category = None;
        let mut color = None;
        let mut location = None;
        for t in tokens {
            if let Some(&c) = types.get(t.as_str()) {
                if category.replace(c).is_some() {
                    return None;
                }
            } else if vocab.color(t).is_some() {
                if color.replace(t.clone()).is_some() {
                    return None;
                }
            } else if let Some(l) = Location::parse(t) {
                if location.replace(l).is_some() {
                    return None;
                }
            }
        }
        Some(Self {
            category: category?,
            color,
            location,
        })
    }

    /// Instance the description denotes in `scene`, if exactly one.
    pub fn resolve(&self, scene: &Scene) -> Option<InstanceId> {
        let cands: Vec<&Instance> = scene
            .instances
            .iter()
            .filter(|i| i.category == self.category)
            .filter(|i| self.color.as_ref().map_or(true, |c| &i.color_attr == c))
            .collect();
        match (self.location, cands.len()) {
            (_, 0) => None,
            (None, 1) => Some(cands[0].instance_id),
            (None, _) => None,
            (Some(loc), 1) => absolute_holds(loc, cands[0], scene).then_some(cands[0].instance_id),
            (Some(loc), _) => unique_extreme(loc, &cands),
        }
    }
}

fn key(loc: Location, inst: &Instance) -> i64 {
    let (cx, cy) = inst.bbox.center2();
    match loc {
        Location::Left => cx as i64,
        Location::Right => -(cx as i64),
        Location::Top => cy as i64,
        Location::Bottom => -(cy as i64),
    }
}

fn unique_extreme(loc: Location, cands: &[&Instance]) -> Option<InstanceId> {
    let best = cands.iter().map(|i| key(loc, i)).min()?;
    let mut hits = cands.iter().filter(|i| key(loc, i) == best);
    let first = hits.next()?;
    hits.next().is_none().then_some(first.instance_id)
}

fn absolute_holds(loc: Location, inst: &Instance, scene: &Scene) -> bool {
    let (cx, cy) = inst.bbox.center2();
    match loc {
        Location::Left => cx < scene.width,
        Location::Right => cx > scene.width,
        Location::Top => cy < scene.height,
        Location::Bottom => cy > scene.height,
    }
}

fn realize<R: Rng>(type_word: &str, color: Option<&str>, loc: Option<Location>, rng: &mut R) -> Vec<String> {
    let mut np: Vec<String> = Vec::new();
    if let Some(c) = color {
        np.push(c.into());
    }
    np.push(type_word.into());
    let Some(loc) = loc else { return np };
    if rng.gen_bool(0.5) {
        np.push("on".into());
        np.push(loc.word().into());
        np
    } else {
        let mut v = vec![loc.word().to_string()];
        v.extend(np);
        v
    }
}

/// Picks a type word, preferring the canonical name.
fn type_word<'a, R: Rng>(vocab: &'a CategoryVocabulary, cat: CategoryId, rng: &mut R) -> &'a str {
    let c = &vocab.categories[cat as usize];
    if c.synonyms.len() == 1 || rng.gen_bool(0.6) {
        return &c.canonical_name;
    }
    let others: Vec<&String> = c.synonyms.iter().filter(|s| **s != c.canonical_name).collect();
    others.choose(rng).expect("nonempty")
}

/// One to three expressions that single out `target`.
pub fn generate_references(
    scene: &Scene,
    vocab: &CategoryVocabulary,
    target: InstanceId,
    mode: DatasetMode,
    seed: u64,
) -> Result<References, WorldError> {
    let inst = scene
        .instance(target)
        .ok_or_else(|| WorldError::Config(format!("target {target} not in scene")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let colors = [None, Some(inst.color_attr.clone())];
    let locs: Vec<Option<Location>> = match mode {
        DatasetMode::LocEnabled => std::iter::once(None).chain(Location::ALL.map(Some)).collect(),
        DatasetMode::LocFree => vec![None],
    };
    let mut valid: Vec<Description> = Vec::new();
    for color in &colors {
        for &location in &locs {
            let d = Description {
                category: inst.category,
                color: color.clone(),
                location,
            };
            if d.resolve(scene) == Some(target) {
                valid.push(d);
            }
        }
    }

    let flagged = valid.is_empty();
    let chosen: Vec<Description> = if flagged {
        vec![Description {
            category: inst.category,
            color: None,
            location: None,
        }]
    } else {
        let n = rng.gen_range(1..=3usize).min(valid.len());
        valid.choose_multiple(&mut rng, n).cloned().collect()
    };
    let expressions = chosen
        .iter()
        .map(|d| RefExpression {
            tokens: realize(
                type_word(vocab, d.category, &mut rng),
                d.color.as_deref(),
                d.location,
                &mut rng,
            ),
            target_instance: target,
        })
        .collect();
    Ok(References { expressions, flagged })
}
