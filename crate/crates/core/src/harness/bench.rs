use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::attention::{gloss_attention, self_attention, sliding_window_attention, AttentionVariant, HeadProjections};
use crate::numerics::{Graph, Tensor};

/// Timing of one attention variant at one sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: &'static str,
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    /// Median wall time of one single-head forward pass.
    pub median_secs: f64,
    /// Query-key score evaluations of one pass.
    pub score_evals: usize,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Times `repeats` forward passes of a single head over random `T x d`
/// input. For the sampled variants `n` is the number of attended positions.
pub fn bench_variant(
    variant: AttentionVariant,
    t: usize,
    d: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchRow, HarnessError> {
    let n = match variant {
        AttentionVariant::SelfAttention => 0,
        AttentionVariant::Gloss { positions } => positions,
        AttentionVariant::SlidingWindow { window } => window,
    };
    if repeats == 0 || d == 0 {
        return Err(HarnessError::Config("bench needs repeats >= 1 and d >= 1".into()));
    }
    if n > 0 && t < 2 * n {
        return Err(HarnessError::Config(format!("T={t} must be at least 2N={}", 2 * n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_matrix(&mut rng, t, d, 1.0);
    let w = (6.0 / (2 * d) as f64).sqrt();
    let (wq, wk, wv) = (
        random_matrix(&mut rng, d, d, w),
        random_matrix(&mut rng, d, d, w),
        random_matrix(&mut rng, d, d, w),
    );
    let wo = random_matrix(&mut rng, n.max(1), d, 0.1);
    let mask = vec![true; t];
    let mut times = Vec::with_capacity(repeats);
    let mut score_evals = 0;
    for _ in 0..repeats {
        let mut g = Graph::new();
        let proj = HeadProjections {
            w_q: g.constant(wq.clone()),
            w_k: g.constant(wk.clone()),
            w_v: g.constant(wv.clone()),
        };
        let xv = g.constant(x.clone());
        let w_off = g.constant(wo.clone());
        let start = Instant::now();
        let out = match variant {
            AttentionVariant::SelfAttention => self_attention(&mut g, xv, &proj, &mask),
            AttentionVariant::Gloss { .. } => gloss_attention(&mut g, xv, &proj, w_off, &mask),
            AttentionVariant::SlidingWindow { window } => sliding_window_attention(&mut g, xv, &proj, window, &mask),
        }
        .map_err(crate::model::ModelError::from)?;
        times.push(start.elapsed().as_secs_f64());
        score_evals = out.score_evals;
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        variant: variant.name(),
        t,
        n,
        d,
        repeats,
        median_secs: times[times.len() / 2],
        score_evals,
    })
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,t,n,d,repeats,median_secs,score_evals\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.9},{}\n",
            r.variant, r.t, r.n, r.d, r.repeats, r.median_secs, r.score_evals
        ));
    }
    s
}
