use super::vocab::{BOS, EOS};
use super::RegError;

/// Anything that scores the next token given the tokens so far.
pub trait NextTokenModel {
    fn next_token_logits(&mut self, prefix: &[usize]) -> Result<Vec<f32>, RegError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids without BOS and EOS.
    pub tokens: Vec<usize>,
    /// Set when `max_len` tokens were produced without EOS.
    pub truncated: bool,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends the argmax token from BOS until EOS or `max_len` tokens.
pub fn greedy_decode<M: NextTokenModel + ?Sized>(model: &mut M, max_len: usize) -> Result<Decoded, RegError> {
    let mut seq = vec![BOS];
    while seq.len() <= max_len {
        let tok = argmax(&model.next_token_logits(&seq)?);
        if tok == EOS {
            return Ok(Decoded {
                tokens: seq[1..].to_vec(),
                truncated: false,
            });
        }
        seq.push(tok);
    }
    Ok(Decoded {
        tokens: seq[1..].to_vec(),
        truncated: true,
    })
}
