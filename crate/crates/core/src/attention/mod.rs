//! Dense self-attention, gloss attention, and a sliding-window baseline.
//!
//! Gloss attention gives every query `N` positions: a window of consecutive
//! frames starting at `t - ceil(N/2)`, shifted by offsets predicted from the
//! query (`O = W_o q_t`) and wrapped into `[0, T)` by floored modulo. Keys and
//! values at the fractional positions are linearly interpolated, so a query
//! scores exactly `N` keys and the cost is `O(N·T)` instead of `O(T²)`.

mod map;

pub use map::AttentionMap;

use crate::numerics::{wrap, Graph, NumericsError, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
}

/// Which attention runs inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    SelfAttention,
    Gloss { positions: usize },
    SlidingWindow { window: usize },
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::SelfAttention => "self",
            Self::Gloss { .. } => "gloss",
            Self::SlidingWindow { .. } => "sliding",
        }
    }
}

/// Per-head query/key/value projections (`d_in x d_head` each).
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Result of one attention head. `weights` is `T_q x K`; for gloss and
/// sliding-window heads `positions` holds the sampled (fractional) frame
/// position of every weight column.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub output: Var,
    pub weights: Var,
    pub positions: Option<Var>,
    pub score_evals: usize,
}

/// Initial window for query `t`: `t - ceil(N/2) + i` for `i = 0..N`.
pub fn init_positions(t: usize, n: usize) -> Vec<f64> {
    let first = t as i64 - n.div_ceil(2) as i64;
    (0..n as i64).map(|i| (first + i) as f64).collect()
}

/// `(P + O) mod T` with floored modulo, so every result lies in `[0, T)`.
pub fn adjust_positions(initial: &[f64], offsets: &[f64], t_len: usize) -> Vec<f64> {
    assert_eq!(initial.len(), offsets.len(), "one offset per position");
    initial
        .iter()
        .zip(offsets)
        .map(|(p, o)| wrap(p + o, t_len as f64))
        .collect()
}

/// Interpolated keys and values at fractional positions `positions`
/// (each in `[0, T)`), outside any gradient graph.
pub fn interpolate_kv(
    positions: &[f64],
    keys: &Tensor,
    values: &Tensor,
) -> Result<(Tensor, Tensor), NumericsError> {
    let mut g = Graph::new();
    let pos = g.constant(Tensor::matrix(1, positions.len(), positions.to_vec()));
    let k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let kh = g.interpolate_rows(k, pos)?;
    let vh = g.interpolate_rows(v, pos)?;
    Ok((g.value(kh).clone(), g.value(vh).clone()))
}

/// Key-validity mask shared by every query, plus an optional causal
/// restriction (query `i` may only see keys `j <= i`).
#[derive(Clone, Debug)]
pub struct KeyMask {
    pub valid: Vec<bool>,
    pub causal: bool,
}

impl KeyMask {
    pub fn all(len: usize) -> Self {
        Self {
            valid: vec![true; len],
            causal: false,
        }
    }

    pub fn from_valid(valid: Vec<bool>) -> Self {
        Self {
            valid,
            causal: false,
        }
    }

    pub fn causal(len: usize) -> Self {
        Self {
            valid: vec![true; len],
            causal: true,
        }
    }

    /// Number of valid keys, which must form a prefix of the sequence.
    pub fn prefix_len(&self) -> Result<usize, AttentionError> {
        let len = self.valid.iter().take_while(|&&v| v).count();
        if self.valid[len..].iter().any(|&v| v) {
            return Err(AttentionError::Contract(
                "local attention needs the valid frames to form a prefix".into(),
            ));
        }
        Ok(len)
    }

    fn dense(&self, t_q: usize) -> Vec<bool> {
        let t_k = self.valid.len();
        let mut m = Vec::with_capacity(t_q * t_k);
        for i in 0..t_q {
            for j in 0..t_k {
                m.push(self.valid[j] && (!self.causal || j <= i));
            }
        }
        m
    }
}

fn project(g: &mut Graph, x: Var, w: Var) -> Result<Var, NumericsError> {
    g.matmul(x, w)
}

/// Scaled dot-product attention over all keys, with masked keys excluded
/// from the softmax. Inputs are already projected.
pub fn dense_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: &KeyMask,
) -> Result<HeadOutput, AttentionError> {
    let (t_q, d) = (g.value(q).rows(), g.value(q).cols());
    let t_k = g.value(k).rows();
    if mask.valid.len() != t_k {
        return Err(AttentionError::Contract(format!(
            "mask covers {} keys, input has {t_k}",
            mask.valid.len()
        )));
    }
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let dense = mask.dense(t_q);
    let weights = g.softmax_last_dim(scores, Some(&dense)).map_err(|e| match e {
        NumericsError::AllMasked { row, .. } => {
            AttentionError::Contract(format!("query {row} has no unmasked key"))
        }
        other => other.into(),
    })?;
    let output = g.matmul(weights, v)?;
    Ok(HeadOutput {
        output,
        weights,
        positions: None,
        score_evals: t_q * t_k,
    })
}

/// Attention over `positions.cols()` sampled keys per query. `positions` is
/// a `T_q x N` node with every entry in `[0, T)`.
fn sampled_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    positions: Var,
) -> Result<HeadOutput, AttentionError> {
    let (t_q, d) = (g.value(q).rows(), g.value(q).cols());
    let n = g.value(positions).cols();
    let k_hat = g.interpolate_rows(k, positions)?;
    let v_hat = g.interpolate_rows(v, positions)?;
    let scores = g.group_dot(q, k_hat)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_last_dim(scores, None)?;
    let output = g.group_weighted_sum(weights, v_hat)?;
    Ok(HeadOutput {
        output,
        weights,
        positions: Some(positions),
        score_evals: t_q * n,
    })
}

/// Gloss attention on projected `q`, `k`, `v`. `w_offset` is `N x d_head`;
/// `t_len` is the true (unpadded) key length used by the modulo, and only
/// keys below it are ever sampled.
pub fn gloss_attention_core(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    w_offset: Var,
    t_len: usize,
) -> Result<HeadOutput, AttentionError> {
    let n = g.value(w_offset).rows();
    if n == 0 {
        return Err(AttentionError::Config("gloss attention needs N >= 1".into()));
    }
    if t_len < 2 {
        return Err(AttentionError::Contract(format!(
            "gloss attention needs at least two frames, got {t_len}"
        )));
    }
    if g.value(k).rows() < t_len {
        return Err(AttentionError::Contract("true length exceeds key count".into()));
    }
    let t_q = g.value(q).rows();
    let offsets = g.matmul_t(q, w_offset)?;
    let mut init = Vec::with_capacity(t_q * n);
    for t in 0..t_q {
        init.extend(init_positions(t, n));
    }
    let init = g.constant(Tensor::matrix(t_q, n, init));
    let shifted = g.add(init, offsets)?;
    let positions = g.floor_mod(shifted, t_len as f64)?;
    sampled_attention(g, q, k, v, positions)
}

/// Window positions `t - ceil(w/2) + i` (mod `T`) for `i < min(w, T)`,
/// which are distinct frames, so a window of at least `T` covers all keys.
pub fn sliding_window_core(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    window: usize,
    t_len: usize,
) -> Result<HeadOutput, AttentionError> {
    if window == 0 {
        return Err(AttentionError::Config("sliding window needs window >= 1".into()));
    }
    if t_len == 0 || g.value(k).rows() < t_len {
        return Err(AttentionError::Contract("invalid true length for sliding window".into()));
    }
    let t_q = g.value(q).rows();
    let width = window.min(t_len);
    let mut pos = Vec::with_capacity(t_q * width);
    for t in 0..t_q {
        let first = t as i64 - window.div_ceil(2) as i64;
        pos.extend((0..width as i64).map(|i| (first + i).rem_euclid(t_len as i64) as f64));
    }
    let positions = g.constant(Tensor::matrix(t_q, width, pos));
    sampled_attention(g, q, k, v, positions)
}

/// Single-head self-attention of `x` with key padding `mask`.
pub fn self_attention(
    g: &mut Graph,
    x: Var,
    proj: &HeadProjections,
    mask: &[bool],
) -> Result<HeadOutput, AttentionError> {
    let q = project(g, x, proj.w_q)?;
    let k = project(g, x, proj.w_k)?;
    let v = project(g, x, proj.w_v)?;
    dense_attention(g, q, k, v, &KeyMask::from_valid(mask.to_vec()))
}

/// Single-head gloss attention of `x`; `mask` marks real frames and must be
/// a prefix.
pub fn gloss_attention(
    g: &mut Graph,
    x: Var,
    proj: &HeadProjections,
    w_offset: Var,
    mask: &[bool],
) -> Result<HeadOutput, AttentionError> {
    let t_len = KeyMask::from_valid(mask.to_vec()).prefix_len()?;
    let q = project(g, x, proj.w_q)?;
    let k = project(g, x, proj.w_k)?;
    let v = project(g, x, proj.w_v)?;
    gloss_attention_core(g, q, k, v, w_offset, t_len)
}

pub fn sliding_window_attention(
    g: &mut Graph,
    x: Var,
    proj: &HeadProjections,
    window: usize,
    mask: &[bool],
) -> Result<HeadOutput, AttentionError> {
    let t_len = KeyMask::from_valid(mask.to_vec()).prefix_len()?;
    let q = project(g, x, proj.w_q)?;
    let k = project(g, x, proj.w_k)?;
    let v = project(g, x, proj.w_v)?;
    sliding_window_core(g, q, k, v, window, t_len)
}

/// Multi-head parameters: full-width projections (`d_model x d_model`)
/// split column-wise across heads, an output projection, and for gloss
/// attention one `N x d_head` offset matrix per head.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub offsets: Vec<Var>,
}

pub struct MultiHeadOutput {
    pub output: Var,
    pub heads: Vec<HeadOutput>,
}

impl MultiHeadOutput {
    pub fn score_evals(&self) -> usize {
        self.heads.iter().map(|h| h.score_evals).sum()
    }

    /// Extracts the per-head maps tagged with `layer`.
    pub fn maps(&self, g: &Graph, layer: usize, key_len: usize) -> Vec<AttentionMap> {
        self.heads
            .iter()
            .enumerate()
            .map(|(head, h)| {
                AttentionMap::new(
                    layer,
                    head,
                    g.value(h.weights).clone(),
                    h.positions.map(|p| g.value(p).clone()),
                    key_len,
                )
                .expect("attention weights are row-normalized")
            })
            .collect()
    }
}

/// Runs `variant` per head on queries from `x_q` and keys/values from
/// `x_kv`, concatenates the heads, and applies the output projection.
pub fn multi_head(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    variant: AttentionVariant,
    params: &MultiHeadParams,
    mask: &KeyMask,
) -> Result<MultiHeadOutput, AttentionError> {
    let d_model = g.value(params.w_q).cols();
    let h = params.heads;
    if h == 0 || !d_model.is_multiple_of(h) {
        return Err(AttentionError::Config(format!(
            "d_model {d_model} is not divisible by {h} heads"
        )));
    }
    if let AttentionVariant::Gloss { .. } = variant {
        if params.offsets.len() != h {
            return Err(AttentionError::Config(format!(
                "gloss attention needs {h} offset matrices, got {}",
                params.offsets.len()
            )));
        }
    }
    let d_head = d_model / h;
    let q_all = g.matmul(x_q, params.w_q)?;
    let k_all = g.matmul(x_kv, params.w_k)?;
    let v_all = g.matmul(x_kv, params.w_v)?;
    let mut heads = Vec::with_capacity(h);
    for head in 0..h {
        let (q, k, v) = if h == 1 {
            (q_all, k_all, v_all)
        } else {
            (
                g.slice_cols(q_all, head * d_head, d_head)?,
                g.slice_cols(k_all, head * d_head, d_head)?,
                g.slice_cols(v_all, head * d_head, d_head)?,
            )
        };
        let out = match variant {
            AttentionVariant::SelfAttention => dense_attention(g, q, k, v, mask)?,
            AttentionVariant::Gloss { .. } => {
                let t_len = local_len(mask)?;
                gloss_attention_core(g, q, k, v, params.offsets[head], t_len)?
            }
            AttentionVariant::SlidingWindow { window } => {
                let t_len = local_len(mask)?;
                sliding_window_core(g, q, k, v, window, t_len)?
            }
        };
        heads.push(out);
    }
    let concat = if h == 1 {
        heads[0].output
    } else {
        let outs: Vec<Var> = heads.iter().map(|o| o.output).collect();
        g.concat_cols(&outs)?
    };
    let output = g.matmul(concat, params.w_out)?;
    Ok(MultiHeadOutput { output, heads })
}

fn local_len(mask: &KeyMask) -> Result<usize, AttentionError> {
    if mask.causal {
        return Err(AttentionError::Config(
            "local attention variants are encoder-only and do not support causal masks".into(),
        ));
    }
    mask.prefix_len()
}
