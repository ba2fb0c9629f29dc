use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::RegError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Output vocabulary: the four specials, then the training words sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn build<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut seen = BTreeSet::new();
        for s in sentences {
            for w in s {
                if !SPECIALS.contains(&w.as_str()) {
                    seen.insert(w.clone());
                }
            }
        }
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(seen).collect();
        Self::try_from(words).expect("specials first, words unique")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `[BOS, w…, EOS]`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(tokens.iter().map(|t| self.id(t)))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Words of a decoded id list, stopping at EOS and dropping specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.word(i).map(String::from))
            .collect()
    }
}

impl TryFrom<Vec<String>> for TokenVocab {
    type Error = RegError;

    fn try_from(words: Vec<String>) -> Result<Self, RegError> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(RegError::Config("token vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(RegError::Config(format!("duplicate token `{w}`")));
            }
        }
        Ok(Self { words, index })
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.words
    }
}
