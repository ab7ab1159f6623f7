use crate::numerics::Tensor;

use super::AttentionError;

/// Attention weights of one head in one layer.
///
/// `weights` is `T_q x K`: `K = T` for dense attention, `K = N` for gloss and
/// sliding-window attention, where `positions` (also `T_q x N`) gives the
/// frame position each column was sampled at.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
    pub positions: Option<Tensor>,
    /// Number of key frames the map refers to.
    pub key_len: usize,
}

const ROW_SUM_TOL: f64 = 1e-6;

impl AttentionMap {
    pub fn new(
        layer: usize,
        head: usize,
        weights: Tensor,
        positions: Option<Tensor>,
        key_len: usize,
    ) -> Result<Self, AttentionError> {
        for r in 0..weights.rows() {
            let row = weights.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(AttentionError::Contract(format!(
                    "attention row {r} is not a distribution (sum {s})"
                )));
            }
        }
        if let Some(p) = &positions {
            if p.shape() != weights.shape() {
                return Err(AttentionError::Contract(
                    "positions and weights differ in shape".into(),
                ));
            }
        }
        Ok(Self {
            layer,
            head,
            weights,
            positions,
            key_len,
        })
    }

    pub fn queries(&self) -> usize {
        self.weights.rows()
    }

    /// The map as a `T_q x key_len` matrix over frames. Sampled columns are
    /// split between the two frames they interpolate, in proportion to the
    /// interpolation weights.
    pub fn frame_weights(&self) -> Tensor {
        let Some(pos) = &self.positions else {
            return self.weights.clone();
        };
        let (t_q, n, t) = (self.weights.rows(), self.weights.cols(), self.key_len);
        let mut dense = vec![0.0; t_q * t];
        for r in 0..t_q {
            for i in 0..n {
                let w = self.weights.at(r, i);
                let p = pos.at(r, i);
                let b = p.floor() as usize;
                let frac = p - b as f64;
                dense[r * t + b] += w * (1.0 - frac);
                if frac > 0.0 {
                    dense[r * t + (b + 1) % t] += w * frac;
                }
            }
        }
        Tensor::matrix(t_q, t, dense)
    }
}
