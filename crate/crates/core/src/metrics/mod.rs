//! Translation metrics (corpus BLEU, ROUGE-L), the average similarity
//! difference between two similarity matrices, and attention diagonality.

use std::collections::HashMap;

use crate::attention::AttentionMap;
use crate::numerics::Tensor;

mod similarity;

pub use similarity::{SimilarityMatrix, SIMILARITY_TOL};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty reference at index {0}")]
    EmptyReference(usize),
    #[error("size mismatch: {0}")]
    Mismatch(String),
    #[error("invalid similarity matrix: {0}")]
    Invalid(String),
    #[error("zero-norm embedding row {0}")]
    ZeroNorm(usize),
    #[error("similarity file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'s, 'a>(toks: &'s [&'a str], n: usize) -> HashMap<&'s [&'a str], usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-1 through BLEU-`n_max` on whitespace tokens: clipped n-gram
/// precisions pooled over the corpus, uniform weights, brevity penalty, no
/// smoothing. Scores are in `[0, 1]`.
pub fn bleu(hypotheses: &[&str], references: &[&str], n_max: usize) -> Result<Vec<f64>, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut matches = vec![0usize; n_max];
    let mut totals = vec![0usize; n_max];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (tokens(h), tokens(r));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=n_max {
            let rc = ngram_counts(&r, n);
            for (gram, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut scores = Vec::with_capacity(n_max);
    let mut zero = false;
    for n in 0..n_max {
        if matches[n] == 0 {
            zero = true;
        } else {
            log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        }
        scores.push(if zero || bp == 0.0 {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(scores)
}

fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-score, `F = (1+β²)PR / (R + β²P)`.
pub fn rouge_l(hypothesis: &str, reference: &str, beta: f64) -> Result<f64, MetricsError> {
    let (h, r) = (tokens(hypothesis), tokens(reference));
    if r.is_empty() {
        return Err(MetricsError::EmptyReference(0));
    }
    let l = lcs(&h, &r);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / h.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * rec / (rec + b2 * p))
}

/// Mean sentence ROUGE-L over the corpus.
pub fn corpus_rouge_l(hypotheses: &[&str], references: &[&str], beta: f64) -> Result<f64, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut total = 0.0;
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        total += rouge_l(h, r, beta).map_err(|_| MetricsError::EmptyReference(i))?;
    }
    Ok(total / hypotheses.len() as f64)
}

/// Average absolute off-diagonal difference between two similarity matrices.
pub fn asd(s_hat: &SimilarityMatrix, s: &SimilarityMatrix) -> Result<f64, MetricsError> {
    let n = s.len();
    if s_hat.len() != n {
        return Err(MetricsError::Mismatch(format!("{} vs {n} samples", s_hat.len())));
    }
    if n < 2 {
        return Err(MetricsError::Mismatch("need at least two samples".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (s_hat.get(i, j) - s.get(i, j)).abs();
            }
        }
    }
    Ok(total / (n * n - n) as f64)
}

const BAND_TOL: f64 = 1e-9;

/// Banded diagonal mass of a row-normalized `T_q x K` matrix. Row `t` is
/// centered on key `r(t) = t (K-1)/(T_q-1)` and collects the weight of keys
/// within `delta * K` of it; the result is the mean over rows.
pub fn cad_matrix(weights: &Tensor, delta: f64) -> f64 {
    let (t_q, k) = (weights.rows(), weights.cols());
    if t_q == 0 || k == 0 {
        return 0.0;
    }
    let half = delta * k as f64 + BAND_TOL;
    let mut total = 0.0;
    for t in 0..t_q {
        let center = if t_q == 1 {
            0.0
        } else {
            t as f64 * (k - 1) as f64 / (t_q - 1) as f64
        };
        total += weights
            .row(t)
            .iter()
            .enumerate()
            .filter(|(j, _)| (*j as f64 - center).abs() <= half)
            .map(|(_, w)| w)
            .sum::<f64>();
    }
    total / t_q as f64
}

/// Diagonality of one attention map, measured on its frame-level weights.
pub fn cad(map: &AttentionMap, delta: f64) -> f64 {
    cad_matrix(&map.frame_weights(), delta)
}

/// Mean diagonality over a set of maps.
pub fn mean_cad(maps: &[AttentionMap], delta: f64) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    maps.iter().map(|m| cad(m, delta)).sum::<f64>() / maps.len() as f64
}

/// Pairwise cosine similarity of the rows of `embeddings` (`n x d`).
pub fn embedding_similarity(embeddings: &Tensor, ids: Vec<String>) -> Result<SimilarityMatrix, MetricsError> {
    let n = embeddings.rows();
    if ids.len() != n {
        return Err(MetricsError::Mismatch(format!("{} ids for {n} rows", ids.len())));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(MetricsError::ZeroNorm(i));
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = embeddings.row(i).iter().zip(embeddings.row(j)).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    SimilarityMatrix::new(ids, values)
}

#[cfg(test)]
mod tests;
