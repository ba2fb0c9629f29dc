use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::WorldError;

pub const LOCATION_WORDS: [&str; 4] = ["left", "right", "top", "bottom"];
pub const FUNCTION_WORDS: [&str; 2] = ["the", "on"];

pub type CategoryId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub canonical_name: String,
    pub synonyms: BTreeSet<String>,
    pub group: Group,
    pub kind: Kind,
    /// Base appearance, one value per channel.
    pub color: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorAttr {
    pub name: String,
    pub value: Vec<f32>,
}

/// Categories plus every other word the world grammar can emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryVocabulary {
    pub categories: Vec<Category>,
    pub generic_nouns: BTreeSet<String>,
    pub colors: Vec<ColorAttr>,
}

impl CategoryVocabulary {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.categories.first().map_or(0, |c| c.color.len())
    }

    pub fn category(&self, id: CategoryId) -> Option<&Category> {
        self.categories.get(id as usize)
    }

    pub fn by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.canonical_name == name)
    }

    pub fn id_of(&self, name: &str) -> Result<CategoryId, WorldError> {
        self.by_name(name)
            .map(|c| c.id)
            .ok_or_else(|| WorldError::Config(format!("unknown category `{name}`")))
    }

    pub fn color(&self, name: &str) -> Option<&ColorAttr> {
        self.colors.iter().find(|c| c.name == name)
    }

    /// Synonym → category, across all categories.
    pub fn type_words(&self) -> BTreeMap<&str, CategoryId> {
        self.categories
            .iter()
            .flat_map(|c| c.synonyms.iter().map(move |s| (s.as_str(), c.id)))
            .collect()
    }

    pub fn is_location_word(w: &str) -> bool {
        LOCATION_WORDS.contains(&w)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.categories.is_empty() {
            return bad("vocabulary has no categories".into());
        }
        let channels = self.channels();
        if channels == 0 {
            return bad("category colors must have at least one channel".into());
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.id as usize != i {
                return bad(format!("category ids must be 0..K-1 in order; `{}` has id {}", c.canonical_name, c.id));
            }
            if !c.synonyms.contains(&c.canonical_name) {
                return bad(format!("canonical name `{}` missing from its synonyms", c.canonical_name));
            }
            if c.color.len() != channels {
                return bad(format!("`{}` color has {} channels, expected {channels}", c.canonical_name, c.color.len()));
            }
            for s in &c.synonyms {
                if s.is_empty() || s.contains(char::is_whitespace) {
                    return bad(format!("synonym `{s}` must be a single nonempty token"));
                }
                if let Some(prev) = seen.insert(s, &c.canonical_name) {
                    return bad(format!("synonym `{s}` shared by `{prev}` and `{}`", c.canonical_name));
                }
                if self.generic_nouns.contains(s) {
                    return bad(format!("synonym `{s}` is also a generic noun"));
                }
            }
        }
        for col in &self.colors {
            if col.value.len() != channels {
                return bad(format!("color `{}` has wrong channel count", col.name));
            }
            if seen.contains_key(col.name.as_str()) || self.generic_nouns.contains(&col.name) {
                return bad(format!("color word `{}` collides with a noun", col.name));
            }
        }
        for w in LOCATION_WORDS.iter().chain(FUNCTION_WORDS.iter()) {
            if seen.contains_key(w) || self.colors.iter().any(|c| c.name == *w) {
                return bad(format!("reserved word `{w}` used as a type or color word"));
            }
        }
        for g in [Group::A, Group::B] {
            if !self.categories.iter().any(|c| c.group == g) {
                return bad(format!("no category in group {g:?}"));
            }
        }
        if self.colors.is_empty() {
            return bad("color palette is empty".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("vocabulary serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The built-in sixteen-category world: two high-frequency person-like
    /// categories (group A), ten scene-bound object categories (group B)
    /// and four background materials.
    pub fn builtin() -> Self {
        let spec: [(&str, &[&str], Group, Kind, [f32; 3]); 16] = [
            ("person", &["man", "guy"], Group::A, Kind::Thing, [0.90, 0.62, 0.48]),
            ("child", &["kid", "boy"], Group::A, Kind::Thing, [0.98, 0.80, 0.25]),
            ("cow", &["cattle"], Group::B, Kind::Thing, [0.45, 0.20, 0.10]),
            ("sheep", &["lamb"], Group::B, Kind::Thing, [0.85, 0.85, 0.70]),
            ("horse", &["pony"], Group::B, Kind::Thing, [0.60, 0.35, 0.05]),
            ("dog", &["puppy"], Group::B, Kind::Thing, [0.30, 0.30, 0.30]),
            ("car", &["auto"], Group::B, Kind::Thing, [0.80, 0.10, 0.15]),
            ("bus", &["coach"], Group::B, Kind::Thing, [0.95, 0.55, 0.05]),
            ("boat", &["ship"], Group::B, Kind::Thing, [0.10, 0.15, 0.55]),
            ("bird", &["duck"], Group::B, Kind::Thing, [0.20, 0.75, 0.70]),
            ("laptop", &["computer"], Group::B, Kind::Thing, [0.55, 0.55, 0.75]),
            ("chair", &["seat"], Group::B, Kind::Thing, [0.40, 0.60, 0.15]),
            ("grass", &[], Group::B, Kind::Stuff, [0.25, 0.65, 0.25]),
            ("road", &["street"], Group::B, Kind::Stuff, [0.35, 0.35, 0.40]),
            ("water", &["sea"], Group::B, Kind::Stuff, [0.15, 0.40, 0.85]),
            ("floor", &[], Group::B, Kind::Stuff, [0.70, 0.55, 0.40]),
        ];
        let categories = spec
            .iter()
            .enumerate()
            .map(|(i, (name, syn, group, kind, color))| {
                let mut synonyms: BTreeSet<String> = syn.iter().map(|s| s.to_string()).collect();
                synonyms.insert(name.to_string());
                Category {
                    id: i as CategoryId,
                    canonical_name: name.to_string(),
                    synonyms,
                    group: *group,
                    kind: *kind,
                    color: color.to_vec(),
                }
            })
            .collect();
        let colors = [
            ("white", [0.97, 0.97, 0.97]),
            ("black", [0.03, 0.03, 0.03]),
            ("brown", [0.50, 0.30, 0.12]),
            ("red", [0.90, 0.05, 0.05]),
            ("blue", [0.05, 0.10, 0.95]),
        ]
        .iter()
        .map(|(n, v)| ColorAttr {
            name: n.to_string(),
            value: v.to_vec(),
        })
        .collect();
        Self {
            categories,
            generic_nouns: ["thing", "one", "object"].iter().map(|s| s.to_string()).collect(),
            colors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_is_valid() {
        let v = CategoryVocabulary::builtin();
        v.validate().unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!(v.channels(), 3);
    }

    #[test]
    fn shared_synonym_is_rejected() {
        let mut v = CategoryVocabulary::builtin();
        v.categories[3].synonyms.insert("cattle".into());
        assert!(v.validate().is_err());
    }

    #[test]
    fn generic_noun_collision_is_rejected() {
        let mut v = CategoryVocabulary::builtin();
        v.generic_nouns.insert("dog".into());
        assert!(v.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = CategoryVocabulary::builtin();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.colors.pop();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
