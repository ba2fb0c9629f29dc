use super::{check_aligned, ngrams, Result, Tokens};

#[derive(Default)]
struct Stats {
    cand_len: usize,
    ref_len: usize,
    correct: [usize; 4],
    guess: [usize; 4],
}

fn accumulate(stats: &mut Stats, cand: &[String], refs: &[Tokens], n: usize) {
    stats.cand_len += cand.len();
    // closest reference length, shorter on ties
    stats.ref_len += refs
        .iter()
        .map(|r| (r.len().abs_diff(cand.len()), r.len()))
        .min()
        .map_or(0, |(_, l)| l);
    for k in 1..=n {
        let c = ngrams(cand, k);
        let mut max_ref: std::collections::HashMap<&[String], usize> = Default::default();
        for r in refs {
            for (g, cnt) in ngrams(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(cnt);
            }
        }
        stats.correct[k - 1] += c.iter().map(|(g, &cnt)| cnt.min(*max_ref.get(g).unwrap_or(&0))).sum::<usize>();
        stats.guess[k - 1] += cand.len().saturating_sub(k - 1);
    }
}

fn score(stats: &Stats, n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 0..n {
        if stats.correct[k] == 0 || stats.guess[k] == 0 {
            return 0.0;
        }
        log_p += (stats.correct[k] as f64 / stats.guess[k] as f64).ln();
    }
    let (c, r) = (stats.cand_len as f64, stats.ref_len as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_p / n as f64).exp()
}

/// Corpus-level BLEU-n: clipped n-gram counts and lengths are pooled over
/// the corpus before the precisions and brevity penalty are formed.
/// No smoothing.
pub fn bleu_n(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64> {
    check_aligned(candidates, references)?;
    if !(1..=4).contains(&n) {
        return Err(super::MetricError::Invalid(format!("BLEU order {n}")));
    }
    let mut stats = Stats::default();
    for (c, r) in candidates.iter().zip(references) {
        accumulate(&mut stats, c, r, n);
    }
    Ok(score(&stats, n))
}

/// BLEU-n of a single candidate.
pub fn sentence_bleu(candidate: &[String], references: &[Tokens], n: usize) -> f64 {
    let mut stats = Stats::default();
    accumulate(&mut stats, candidate, references, n.clamp(1, 4));
    score(&stats, n.clamp(1, 4))
}
