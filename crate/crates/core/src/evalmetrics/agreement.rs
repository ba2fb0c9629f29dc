use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{JudgmentCategory, MetricError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub kappa: f64,
    pub n_items: usize,
    pub n_annotators: usize,
    /// Share of all ratings per category.
    pub marginals: BTreeMap<JudgmentCategory, f64>,
}

/// Fleiss' kappa over an items × annotators matrix.
pub fn fleiss_kappa(ratings: &[Vec<JudgmentCategory>]) -> Result<AgreementReport> {
    let n_items = ratings.len();
    if n_items == 0 {
        return Err(MetricError::Invalid("no items".into()));
    }
    let n = ratings[0].len();
    if n < 2 {
        return Err(MetricError::Invalid("need at least two annotators".into()));
    }
    if let Some(i) = ratings.iter().position(|r| r.len() != n) {
        return Err(MetricError::Invalid(format!("item {i} has {} ratings, expected {n}", ratings[i].len())));
    }
    let cats = JudgmentCategory::ALL;
    let mut totals = [0usize; 4];
    let mut p_bar = 0.0;
    for item in ratings {
        let mut counts = [0usize; 4];
        for c in item {
            counts[cats.iter().position(|x| x == c).expect("known category")] += 1;
        }
        let sq: usize = counts.iter().map(|c| c * c).sum();
        p_bar += (sq - n) as f64 / (n * (n - 1)) as f64;
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    p_bar /= n_items as f64;
    let all = (n_items * n) as f64;
    let marginals: BTreeMap<JudgmentCategory, f64> =
        cats.iter().zip(totals).map(|(&c, t)| (c, t as f64 / all)).collect();
    let p_e: f64 = marginals.values().map(|p| p * p).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(MetricError::UndefinedKappa("all ratings fall in one category".into()));
    }
    Ok(AgreementReport {
        kappa: (p_bar - p_e) / (1.0 - p_e),
        n_items,
        n_annotators: n,
        marginals,
    })
}

/// Plurality label; ties go to the most severe category (F > M > O > A).
pub fn majority_vote(votes: &[JudgmentCategory]) -> Result<JudgmentCategory> {
    if votes.is_empty() {
        return Err(MetricError::Invalid("no votes".into()));
    }
    let mut counts: BTreeMap<JudgmentCategory, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .max_by_key(|&(c, n)| (n, c.severity()))
        .map(|(c, _)| c)
        .expect("nonempty"))
}
