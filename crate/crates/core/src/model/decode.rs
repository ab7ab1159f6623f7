use std::cmp::Ordering;

use super::{ModelError, Session, Translator};
use crate::data::{BOS_ID, EOS_ID};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl DecodeMode {
    pub fn from_width(width: usize) -> Self {
        if width <= 1 {
            Self::Greedy
        } else {
            Self::Beam(width)
        }
    }
}

/// First index of the maximum; ties go to the lowest token id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

struct Memory {
    hidden: Var,
    valid: Vec<bool>,
}

impl Session<'_> {
    fn next_logits(&mut self, memory: &Memory, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let emb = self.embed_texts(&[prefix])?;
        let logits = self.decode(memory.hidden, &memory.valid, emb[0])?;
        let t = self.graph.value(logits);
        Ok(t.row(t.rows() - 1).to_vec())
    }
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
}

impl Translator {
    /// Decodes one clip. The returned sentence excludes BOS and EOS.
    pub fn translate(&self, features: &Tensor, mode: DecodeMode) -> Result<Vec<usize>, ModelError> {
        self.translate_with_limit(features, mode, self.config.max_output_len)
    }

    pub fn translate_with_limit(
        &self,
        features: &Tensor,
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Vec<usize>, ModelError> {
        if max_len < 1 {
            return Err(ModelError::Config("max_len must be at least 1".into()));
        }
        let mut s = self.session(false, 0);
        let emb = s.embed_videos(&[features])?;
        let valid = vec![true; features.rows()];
        let enc = s.encode(emb[0], &valid)?;
        let memory = Memory {
            hidden: enc.hidden,
            valid,
        };
        match mode {
            DecodeMode::Greedy => greedy(&mut s, &memory, max_len),
            DecodeMode::Beam(k) => beam(&mut s, &memory, max_len, k.max(1)),
        }
    }
}

fn greedy(s: &mut Session<'_>, memory: &Memory, max_len: usize) -> Result<Vec<usize>, ModelError> {
    let mut prefix = vec![BOS_ID];
    for _ in 0..max_len {
        let next = argmax(&s.next_logits(memory, &prefix)?);
        if next == EOS_ID {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    Ok(prefix)
}

/// Beam search over summed log-probabilities without length normalization.
/// Candidates are ranked by score, ties broken by parent rank and then by
/// token id, so width 1 reproduces greedy decoding exactly.
fn beam(s: &mut Session<'_>, memory: &Memory, max_len: usize, width: usize) -> Result<Vec<usize>, ModelError> {
    let mut live = vec![Hypothesis {
        tokens: vec![BOS_ID],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (rank, hyp) in live.iter().enumerate() {
            let logp = log_softmax(&s.next_logits(memory, &hyp.tokens)?);
            candidates.extend(logp.iter().enumerate().map(|(tok, lp)| (hyp.score + lp, rank, tok)));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for &(score, rank, tok) in candidates.iter().take(width) {
            let mut tokens = live[rank].tokens.clone();
            if tok == EOS_ID {
                finished.push(Hypothesis { tokens, score });
            } else {
                tokens.push(tok);
                next.push(Hypothesis { tokens, score });
            }
        }
        live = next;
        if finished.len() >= width || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    let best = pool
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(Ordering::Equal)
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h.tokens[1..].to_vec())
        .unwrap_or_default();
    Ok(best)
}
