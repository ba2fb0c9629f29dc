use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::sceneworld::{CategoryId, CategoryVocabulary, InstanceId, Scene};

pub const PRONOUNS: [&str; 4] = ["it", "that", "this", "them"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JudgmentCategory {
    A,
    M,
    O,
    F,
}

impl JudgmentCategory {
    pub const ALL: [JudgmentCategory; 4] = [Self::A, Self::M, Self::O, Self::F];

    /// Rank used to break voting ties; higher is more severe.
    pub fn severity(self) -> u8 {
        match self {
            Self::A => 0,
            Self::O => 1,
            Self::M => 2,
            Self::F => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::M => "M",
            Self::O => "O",
            Self::F => "F",
        }
    }
}

impl fmt::Display for JudgmentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JudgmentCategory {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| MetricError::Invalid(format!("unknown judgment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub category: JudgmentCategory,
    pub matched_type_word: Option<String>,
    pub matched_instance: Option<InstanceId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeLexicon {
    /// Synonyms as token sequences, per category.
    pub synonyms: BTreeMap<CategoryId, BTreeSet<Vec<String>>>,
    pub generic_nouns: BTreeSet<String>,
    pub pronouns: BTreeSet<String>,
}

impl JudgeLexicon {
    pub fn from_vocabulary(vocab: &CategoryVocabulary) -> Self {
        let synonyms = vocab
            .categories
            .iter()
            .map(|c| {
                let forms = c
                    .synonyms
                    .iter()
                    .map(|s| s.split_whitespace().map(String::from).collect())
                    .collect();
                (c.id, forms)
            })
            .collect();
        Self {
            synonyms,
            generic_nouns: vocab.generic_nouns.iter().cloned().collect(),
            pronouns: PRONOUNS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Type words found left to right, preferring the longest synonym at
    /// each position.
    pub fn scan(&self, tokens: &[String]) -> Vec<(CategoryId, String)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let best = self
                .synonyms
                .iter()
                .flat_map(|(&c, forms)| forms.iter().map(move |f| (c, f)))
                .filter(|(_, f)| !f.is_empty() && tokens[i..].starts_with(f))
                .max_by_key(|(c, f)| (f.len(), std::cmp::Reverse(*c)));
            match best {
                Some((c, f)) => {
                    out.push((c, f.join(" ")));
                    i += f.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Rates only the type description of an expression: A if it names the
/// target's category, M if it names an object overlapping the target box,
/// F for any other type word, O when no type word is present.
pub fn judge_type(tokens: &[String], scene: &Scene, target: InstanceId, lexicon: &JudgeLexicon) -> Judgment {
    let matches = lexicon.scan(tokens);
    let Some(tgt) = scene.instance(target) else {
        return Judgment {
            category: if matches.is_empty() { JudgmentCategory::O } else { JudgmentCategory::F },
            matched_type_word: matches.first().map(|m| m.1.clone()),
            matched_instance: None,
        };
    };
    if let Some((_, w)) = matches.iter().find(|(c, _)| *c == tgt.category) {
        return Judgment {
            category: JudgmentCategory::A,
            matched_type_word: Some(w.clone()),
            matched_instance: Some(target),
        };
    }
    for (c, w) in &matches {
        let hit = scene
            .instances
            .iter()
            .find(|i| i.instance_id != target && i.category == *c && i.bbox.overlaps(&tgt.bbox));
        if let Some(inst) = hit {
            return Judgment {
                category: JudgmentCategory::M,
                matched_type_word: Some(w.clone()),
                matched_instance: Some(inst.instance_id),
            };
        }
    }
    match matches.first() {
        Some((_, w)) => Judgment {
            category: JudgmentCategory::F,
            matched_type_word: Some(w.clone()),
            matched_instance: None,
        },
        None => Judgment {
            category: JudgmentCategory::O,
            matched_type_word: None,
            matched_instance: None,
        },
    }
}
