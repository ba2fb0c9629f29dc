//! Surface metrics, the type-adequacy judge and annotator agreement.

mod agreement;
mod bleu;
mod cider;
mod judge;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::{fleiss_kappa, majority_vote, AgreementReport};
pub use bleu::{bleu_n, sentence_bleu};
pub use cider::{cider, cider_items};
pub use judge::{judge_type, JudgeLexicon, Judgment, JudgmentCategory, PRONOUNS};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    Misaligned { candidates: usize, references: usize },
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("kappa undefined: {0}")]
    UndefinedKappa(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub type Tokens = Vec<String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub cider: f64,
    pub n_items: usize,
    pub per_item: Vec<ItemScores>,
}

/// Corpus BLEU-1/2 and CIDEr-D with per-item scores.
pub fn evaluate(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<MetricReport> {
    let bleu1 = bleu_n(candidates, references, 1)?;
    let bleu2 = bleu_n(candidates, references, 2)?;
    let items = cider_items(candidates, references)?;
    let cider = items.iter().sum::<f64>() / items.len() as f64;
    let per_item = candidates
        .iter()
        .zip(references)
        .zip(&items)
        .map(|((c, r), &cider)| ItemScores {
            bleu1: sentence_bleu(c, r, 1),
            bleu2: sentence_bleu(c, r, 2),
            cider,
        })
        .collect();
    Ok(MetricReport {
        bleu1,
        bleu2,
        cider,
        n_items: candidates.len(),
        per_item,
    })
}

fn check_aligned<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::Misaligned {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    Ok(())
}

/// n-gram counts of order `n`.
fn ngrams(tokens: &[String], n: usize) -> std::collections::HashMap<&[String], usize> {
    let mut out = std::collections::HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}
