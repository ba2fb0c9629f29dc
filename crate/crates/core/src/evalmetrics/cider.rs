//! CIDEr-D as in the COCO caption toolkit: tf-idf n-gram vectors (n = 1..4)
//! with document frequencies from the evaluation references, clipped
//! candidate weights, a Gaussian length penalty (σ = 6) and a ×10 scale.
//! Lengths are counted the way the toolkit counts them, from bigram
//! counts.

use std::collections::{BTreeMap, BTreeSet};

use super::{check_aligned, MetricError, Result, Tokens};

const N: usize = 4;
const SIGMA: f64 = 6.0;

struct Vectors {
    vec: [BTreeMap<Vec<String>, f64>; N],
    norm: [f64; N],
    length: f64,
}

fn counts(tokens: &[String]) -> [BTreeMap<Vec<String>, usize>; N] {
    std::array::from_fn(|k| {
        let mut m = BTreeMap::new();
        if tokens.len() > k {
            for w in tokens.windows(k + 1) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    })
}

fn to_vec(cnts: &[BTreeMap<Vec<String>, usize>; N], df: &BTreeMap<Vec<String>, f64>, log_n: f64) -> Vectors {
    let mut vec: [BTreeMap<Vec<String>, f64>; N] = Default::default();
    let mut norm = [0.0; N];
    let mut length = 0.0;
    for k in 0..N {
        for (g, &tf) in &cnts[k] {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let v = tf as f64 * (log_n - d);
            norm[k] += v * v;
            vec[k].insert(g.clone(), v);
            if k == 1 {
                length += tf as f64;
            }
        }
        norm[k] = norm[k].sqrt();
    }
    Vectors { vec, norm, length }
}

fn sim(hyp: &Vectors, r: &Vectors) -> [f64; N] {
    let delta = hyp.length - r.length;
    std::array::from_fn(|k| {
        let mut val = 0.0;
        for (g, &h) in &hyp.vec[k] {
            if let Some(&rv) = r.vec[k].get(g) {
                val += h.min(rv) * rv;
            }
        }
        if hyp.norm[k] != 0.0 && r.norm[k] != 0.0 {
            val /= hyp.norm[k] * r.norm[k];
        }
        val * (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp()
    })
}

/// Per-item CIDEr-D scores.
pub fn cider_items(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<Vec<f64>> {
    check_aligned(candidates, references)?;
    let distinct: BTreeSet<&Vec<Tokens>> = references.iter().collect();
    if distinct.len() < 2 {
        return Err(MetricError::DegenerateCorpus(
            "idf needs at least two distinct reference sets".into(),
        ));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(MetricError::Invalid("item without references".into()));
    }
    let ref_counts: Vec<Vec<_>> = references.iter().map(|rs| rs.iter().map(|r| counts(r)).collect()).collect();
    let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for rs in &ref_counts {
        let mut seen: BTreeSet<&Vec<String>> = BTreeSet::new();
        for c in rs {
            for m in c {
                seen.extend(m.keys());
            }
        }
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (references.len() as f64).ln();
    Ok(candidates
        .iter()
        .zip(&ref_counts)
        .map(|(c, rs)| {
            let hyp = to_vec(&counts(c), &df, log_n);
            let mut total = [0.0; N];
            for r in rs {
                let rv = to_vec(r, &df, log_n);
                for (t, s) in total.iter_mut().zip(sim(&hyp, &rv)) {
                    *t += s;
                }
            }
            let mean = total.iter().sum::<f64>() / N as f64;
            mean / rs.len() as f64 * 10.0
        })
        .collect())
}

/// Corpus CIDEr-D: the mean of the per-item scores.
pub fn cider(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    let items = cider_items(candidates, references)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}
