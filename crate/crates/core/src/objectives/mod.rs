//! Label-smoothed cross-entropy, the sentence-similarity knowledge-transfer
//! loss, and their weighted sum. Each loss has a graph form for training and
//! a plain form for checking and reporting.

use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("smoothing {0} outside [0, 1)")]
    Smoothing(f64),
    #[error("every target is padding")]
    AllPad,
    #[error("zero-norm sentence embedding")]
    ZeroNorm,
    #[error("size mismatch: {0}")]
    Mismatch(String),
}

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub translation: f64,
    pub kt: f64,
    pub total: f64,
    pub tokens: usize,
}

impl LossReport {
    pub fn new(translation: f64, kt: f64, lambda_kt: f64, tokens: usize) -> Self {
        Self {
            translation,
            kt,
            total: total_loss(translation, kt, lambda_kt),
            tokens,
        }
    }
}

pub fn total_loss(translation: f64, kt: f64, lambda_kt: f64) -> f64 {
    translation + lambda_kt * kt
}

/// Smoothed target distribution, one row per target; rows of pad targets
/// are zero. The gold token gets `1 - eps`, every other non-pad token an
/// equal share of `eps`.
fn smoothed_targets(
    targets: &[usize],
    vocab: usize,
    eps: f64,
    pad: Option<usize>,
) -> Result<(Tensor, usize), ObjectiveError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(ObjectiveError::Smoothing(eps));
    }
    let others = vocab - 1 - usize::from(pad.is_some_and(|p| p < vocab));
    let share = if others == 0 { 0.0 } else { eps / others as f64 };
    let mut dist = vec![0.0; targets.len() * vocab];
    let mut count = 0;
    for (m, &y) in targets.iter().enumerate() {
        if y >= vocab {
            return Err(ObjectiveError::Mismatch(format!("target {y} outside vocabulary of {vocab}")));
        }
        if Some(y) == pad {
            continue;
        }
        count += 1;
        let row = &mut dist[m * vocab..(m + 1) * vocab];
        row.fill(share);
        if let Some(p) = pad.filter(|&p| p < vocab) {
            row[p] = 0.0;
        }
        row[y] = 1.0 - eps + if others == 0 { eps } else { 0.0 };
    }
    if count == 0 {
        return Err(ObjectiveError::AllPad);
    }
    Ok((Tensor::matrix(targets.len(), vocab, dist), count))
}

/// Mean over non-pad positions of `-sum_v p(v) log softmax(logits)(v)`.
pub fn label_smoothed_ce(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    eps: f64,
    pad: Option<usize>,
) -> Result<(Var, usize), ObjectiveError> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(ObjectiveError::Mismatch(format!(
            "logits {shape:?} for {} targets",
            targets.len()
        )));
    }
    let (dist, count) = smoothed_targets(targets, shape[1], eps, pad)?;
    let logp = g.log_softmax_last_dim(logits);
    let p = g.constant(dist);
    let prod = g.mul(logp, p)?;
    let s = g.sum(prod);
    Ok((g.scale(s, -1.0 / count as f64), count))
}

/// Plain-value form of [`label_smoothed_ce`].
pub fn label_smoothed_ce_value(
    logits: &Tensor,
    targets: &[usize],
    eps: f64,
    pad: Option<usize>,
) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let (loss, _) = label_smoothed_ce(&mut g, l, targets, eps, pad)?;
    Ok(g.value(loss).item())
}

/// `(cos(e_i, e_j) - s)^2`.
pub fn kt_loss(e_i: &[f64], e_j: &[f64], s: f64) -> Result<f64, ObjectiveError> {
    if e_i.len() != e_j.len() {
        return Err(ObjectiveError::Mismatch(format!("{} vs {} dims", e_i.len(), e_j.len())));
    }
    let dot: f64 = e_i.iter().zip(e_j).map(|(a, b)| a * b).sum();
    let ni = e_i.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nj = e_j.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ni == 0.0 || nj == 0.0 {
        return Err(ObjectiveError::ZeroNorm);
    }
    Ok((dot / (ni * nj) - s).powi(2))
}

/// Batched knowledge-transfer loss: the mean of `(cos(e_i, e_j) - S_ij)^2`
/// over ordered pairs `i != j`. `similarity` is row-major `n x n`. A batch of
/// one sample has no pairs and contributes zero.
pub fn kt_loss_batch(g: &mut Graph, embeddings: &[Var], similarity: &[f64]) -> Result<Var, ObjectiveError> {
    let n = embeddings.len();
    if similarity.len() != n * n {
        return Err(ObjectiveError::Mismatch(format!(
            "{} similarity entries for {n} embeddings",
            similarity.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let cos = g.cosine_similarity(embeddings[i], embeddings[j]).map_err(|e| match e {
                NumericsError::ZeroNorm { .. } => ObjectiveError::ZeroNorm,
                other => other.into(),
            })?;
            // S is symmetric, so each unordered pair stands for both orders.
            let s = (similarity[i * n + j] + similarity[j * n + i]) / 2.0;
            let target = g.constant(Tensor::scalar(s));
            let d = g.sub(cos, target)?;
            let sq = g.mul(d, d)?;
            total = Some(match total {
                Some(t) => g.add(t, sq)?,
                None => sq,
            });
            pairs += 1;
        }
    }
    match total {
        Some(t) => Ok(g.scale(t, 1.0 / pairs as f64)),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}
