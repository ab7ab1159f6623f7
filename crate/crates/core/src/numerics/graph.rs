//! Tape-based reverse-mode differentiation over a fixed set of primitives.
//!
//! Every operation appends a node to the [`Graph`]; node indices are handed
//! out as [`Var`]s. Because a node can only refer to earlier nodes, the tape
//! order is already a topological order and [`Graph::backward`] is a single
//! reverse sweep.

use rand::Rng;

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Train mode normalizes with batch statistics and updates the running
/// estimates; eval mode normalizes with the running estimates.
pub enum BatchNormMode<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

enum Op {
    /// Leaf, or any node none of whose inputs needs a gradient.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout(Var, Vec<f64>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Cosine(Var, Var),
    Embedding(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    FloorMod(Var),
    Interp {
        src: Var,
        pos: Var,
        lower: Vec<usize>,
        upper: Vec<usize>,
    },
    GroupDot(Var, Var),
    GroupWeightedSum(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Dimension { op, detail }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    if t.shape().len() > 2 {
        return Err(dim_err(op, format!("expected rank <= 2, got shape {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is collected for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip_map shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("map shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let tb = self.value(bias);
        let cols = ta.cols();
        if tb.len() != cols {
            return Err(dim_err(
                "add_row",
                format!("bias of {} values for {cols} columns", tb.len()),
            ));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            row.iter_mut().zip(tb.data()).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a (m x k) · b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul", format!("({m} x {k}) · ({k2} x {n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a (m x k) · bᵀ` where `b` is `n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = as_matrix("matmul_t", self.value(a))?;
        let (n, k2) = as_matrix("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul_t", format!("({m} x {k}) · ({n} x {k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = as_matrix("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::matrix(c, r, out), Op::Transpose(a), &[a]))
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    /// Row-wise softmax over the last dimension. Entries whose `mask` value is
    /// false receive weight exactly zero; a row with no unmasked entry is an
    /// error.
    pub fn softmax_last_dim(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if let Some(m) = mask {
            if m.len() != ta.len() {
                return Err(dim_err(
                    "softmax_last_dim",
                    format!("mask of {} entries for {} values", m.len(), ta.len()),
                ));
            }
        }
        let cols = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            let x = ta.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::AllMasked {
                    op: "softmax_last_dim",
                    row: r,
                });
            }
            let y = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    y[j] = (x[j] - max).exp();
                    total += y[j];
                }
            }
            y.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_last_dim(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = ta.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance, then `gain` and
    /// `bias` (each of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let cols = tx.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "gain {} / bias {} for {cols} columns",
                    self.value(gain).len(),
                    self.value(bias).len()
                ),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                xhat[r * cols + j] = (row[j] - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % cols] + b[i % cols])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Per-column normalization over the rows (the batch axis).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix("batch_norm", tx)?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(dim_err(
                "batch_norm",
                format!("gain/bias length differs from {cols} features"),
            ));
        }
        let (mean, inv_std, batch_stats) = match mode {
            BatchNormMode::Train(stats) => {
                if rows < 2 {
                    return Err(NumericsError::BatchNormSingleRow);
                }
                if stats.mean.len() != cols {
                    return Err(dim_err("batch_norm", "running stats width".into()));
                }
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(tx.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for (j, v) in tx.row(r).iter().enumerate() {
                        var[j] += (v - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let unbias = rows as f64 / (rows - 1) as f64;
                for j in 0..cols {
                    stats.mean[j] =
                        (1.0 - BATCH_NORM_MOMENTUM) * stats.mean[j] + BATCH_NORM_MOMENTUM * mean[j];
                    stats.var[j] = (1.0 - BATCH_NORM_MOMENTUM) * stats.var[j]
                        + BATCH_NORM_MOMENTUM * var[j] * unbias;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                (mean, inv, true)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != cols {
                    return Err(dim_err("batch_norm", "running stats width".into()));
                }
                let inv = stats
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
                    .collect();
                (stats.mean.clone(), inv, false)
            }
        };
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            for j in 0..cols {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` so that eval
    /// mode (`train == false`) is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                detail: format!("p = {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let out = tx.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Dropout(x, scale), &[x]))
    }

    /// Column means over all rows, shape `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix("mean_reduce", tx)?;
        if rows == 0 {
            return Err(dim_err("mean_reduce", "zero rows".into()));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            out.iter_mut().zip(tx.row(r)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        Ok(self.push(Tensor::matrix(1, cols, out), Op::MeanRows(x), &[x]))
    }

    /// Column maxima over all rows, shape `[1, cols]`. Ties resolve to the
    /// first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix("max_reduce", tx)?;
        if rows == 0 {
            return Err(dim_err("max_reduce", "zero rows".into()));
        }
        let mut arg = vec![0usize; cols];
        let mut out = tx.row(0).to_vec();
        for r in 1..rows {
            for (j, &v) in tx.row(r).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    arg[j] = r;
                }
            }
        }
        Ok(self.push(Tensor::matrix(1, cols, out), Op::MaxRows(x, arg), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(dim_err("mean", "empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(dim_err(
                "cosine_similarity",
                format!("lengths {} and {}", ta.len(), tb.len()),
            ));
        }
        let na = norm(ta.data());
        let nb = norm(tb.data());
        if na == 0.0 || nb == 0.0 {
            return Err(NumericsError::ZeroNorm {
                op: "cosine_similarity",
            });
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(dot / (na * nb)), Op::Cosine(a, b), &[a, b]))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        let (rows, cols) = as_matrix("embedding_lookup", tt)?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::OutOfRange {
                    op: "embedding_lookup",
                    detail: format!("id {id} >= table size {rows}"),
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), cols, out),
            Op::Embedding(table, ids.to_vec()),
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(dim_err("concat", "no inputs".into()));
        };
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            as_matrix("concat", t)?;
            if t.cols() != cols {
                return Err(dim_err("concat", format!("column counts {cols} and {}", t.cols())));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (rows, cols) = as_matrix("slice", t)?;
        if start + len > rows {
            return Err(dim_err("slice", format!("rows {start}..{} of {rows}", start + len)));
        }
        let out = t.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::matrix(len, cols, out), Op::SliceRows(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(dim_err("concat_cols", "no inputs".into()));
        };
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            as_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(dim_err("concat_cols", format!("row counts {rows} and {}", t.rows())));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        Ok(self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (rows, cols) = as_matrix("slice_cols", t)?;
        if start + len > cols {
            return Err(dim_err("slice_cols", format!("cols {start}..{} of {cols}", start + len)));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(rows, len, out), Op::SliceCols(x, start), &[x]))
    }

    /// Floored modulo into `[0, modulus)`. The derivative is 1 away from the
    /// wrap points.
    pub fn floor_mod(&mut self, x: Var, modulus: f64) -> Result<Var, NumericsError> {
        if !(modulus > 0.0) {
            return Err(NumericsError::InvalidArgument {
                op: "floor_mod",
                detail: format!("modulus {modulus}"),
            });
        }
        let out = self.map(x, |v| wrap(v, modulus));
        Ok(self.push(out, Op::FloorMod(x), &[x]))
    }

    /// Samples rows of `src` (`T x d`) at fractional positions `pos`
    /// (`Q x N`, each in `[0, T)`) by linear interpolation between row
    /// `floor(p)` and row `(floor(p) + 1) mod T`. Output is `(Q·N) x d`, row
    /// `q·N + i` holding the sample for `pos[q, i]`.
    pub fn interpolate_rows(&mut self, src: Var, pos: Var) -> Result<Var, NumericsError> {
        let ts = self.value(src);
        let tp = self.value(pos);
        let (t_len, d) = as_matrix("interpolate_rows", ts)?;
        as_matrix("interpolate_rows", tp)?;
        let n = tp.len();
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for (idx, &p) in tp.data().iter().enumerate() {
            if !(p >= 0.0 && p < t_len as f64) {
                return Err(NumericsError::OutOfRange {
                    op: "interpolate_rows",
                    detail: format!("position {p} outside [0, {t_len})"),
                });
            }
            let b = p.floor() as usize;
            let u = (b + 1) % t_len;
            let wu = p - b as f64;
            let wb = 1.0 - wu;
            let (rb, ru) = (ts.row(b), ts.row(u));
            let dst = &mut out[idx * d..(idx + 1) * d];
            for c in 0..d {
                dst[c] = wb * rb[c] + wu * ru[c];
            }
            lower.push(b);
            upper.push(u);
        }
        Ok(self.push(
            Tensor::matrix(n, d, out),
            Op::Interp {
                src,
                pos,
                lower,
                upper,
            },
            &[src, pos],
        ))
    }

    /// `out[q, i] = <a_q, b_{q·N + i}>` for `a: Q x d`, `b: (Q·N) x d`.
    pub fn group_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (q, d) = as_matrix("group_dot", self.value(a))?;
        let (qn, d2) = as_matrix("group_dot", self.value(b))?;
        if d != d2 || q == 0 || qn % q != 0 {
            return Err(dim_err("group_dot", format!("({q} x {d}) against ({qn} x {d2})")));
        }
        let n = qn / q;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; qn];
        for r in 0..q {
            let ar = ta.row(r);
            for i in 0..n {
                out[r * n + i] = dot(ar, tb.row(r * n + i));
            }
        }
        Ok(self.push(Tensor::matrix(q, n, out), Op::GroupDot(a, b), &[a, b]))
    }

    /// `out[q] = Σ_i w[q, i] · v_{q·N + i}` for `w: Q x N`, `v: (Q·N) x d`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var, NumericsError> {
        let (q, n) = as_matrix("group_weighted_sum", self.value(w))?;
        let (qn, d) = as_matrix("group_weighted_sum", self.value(v))?;
        if q * n != qn {
            return Err(dim_err(
                "group_weighted_sum",
                format!("weights ({q} x {n}) against values ({qn} x {d})"),
            ));
        }
        let (tw, tv) = (self.value(w), self.value(v));
        let mut out = vec![0.0; q * d];
        for r in 0..q {
            let dst = &mut out[r * d..(r + 1) * d];
            for i in 0..n {
                let wi = tw.at(r, i);
                for (o, x) in dst.iter_mut().zip(tv.row(r * n + i)) {
                    *o += wi * x;
                }
            }
        }
        Ok(self.push(Tensor::matrix(q, d, out), Op::GroupWeightedSum(w, v), &[w, v]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        accumulate(&mut grads[v.0], self.nodes[v.0].value.len())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(self.slot(grads, a), g);
                }
                if self.wants(b) {
                    self.slot(grads, b).iter_mut().zip(g).for_each(|(s, x)| *s -= x);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let other = self.value(b).data();
                    let s = self.slot(grads, a);
                    for i in 0..g.len() {
                        s[i] += g[i] * other[i];
                    }
                }
                if self.wants(b) {
                    let other = self.value(a).data();
                    let s = self.slot(grads, b);
                    for i in 0..g.len() {
                        s[i] += g[i] * other[i];
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if self.wants(a) {
                    add_into(self.slot(grads, a), g);
                }
                if self.wants(bias) {
                    let cols = self.value(bias).len();
                    let s = self.slot(grads, bias);
                    for row in g.chunks(cols.max(1)) {
                        add_into(s, row);
                    }
                }
            }
            &Op::Scale(a, k) => {
                if self.wants(a) {
                    self.slot(grads, a).iter_mut().zip(g).for_each(|(s, x)| *s += k * x);
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.wants(a) {
                    let bd = self.value(b).data();
                    gemm(m, n, k, g, false, bd, true, self.slot(grads, a), true);
                }
                if self.wants(b) {
                    let ad = self.value(a).data();
                    gemm(k, m, n, ad, true, g, false, self.slot(grads, b), true);
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                if self.wants(a) {
                    let bd = self.value(b).data();
                    gemm(m, n, k, g, false, bd, false, self.slot(grads, a), true);
                }
                if self.wants(b) {
                    let ad = self.value(a).data();
                    gemm(n, m, k, g, true, ad, false, self.slot(grads, b), true);
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    let (r, c) = (self.value(a).rows(), self.value(a).cols());
                    let s = self.slot(grads, a);
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Relu(a) => {
                if self.wants(a) {
                    let x = self.value(a).data();
                    let s = self.slot(grads, a);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                if self.wants(a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let s = self.slot(grads, a);
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let inner = dot(yr, gr);
                        for (j, sj) in s[span].iter_mut().enumerate() {
                            *sj += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if self.wants(a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let s = self.slot(grads, a);
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let gsum: f64 = g[span.clone()].iter().sum();
                        for j in span {
                            s[j] += g[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                if self.wants(*gain) {
                    let s = self.slot(grads, *gain);
                    for i in 0..g.len() {
                        s[i % cols] += g[i] * xhat[i];
                    }
                }
                if self.wants(*bias) {
                    let s = self.slot(grads, *bias);
                    for i in 0..g.len() {
                        s[i % cols] += g[i];
                    }
                }
                if self.wants(*x) {
                    let gn = self.value(*gain).data();
                    let s = self.slot(grads, *x);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let base = r * cols;
                        for j in 0..cols {
                            dxhat[j] = g[base + j] * gn[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx =
                            (0..cols).map(|j| dxhat[j] * xhat[base + j]).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            s[base + j] +=
                                inv_std[r] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                if self.wants(*gain) {
                    let s = self.slot(grads, *gain);
                    for i in 0..g.len() {
                        s[i % cols] += g[i] * xhat[i];
                    }
                }
                if self.wants(*bias) {
                    let s = self.slot(grads, *bias);
                    for i in 0..g.len() {
                        s[i % cols] += g[i];
                    }
                }
                if self.wants(*x) {
                    let gn = self.value(*gain).data();
                    let s = self.slot(grads, *x);
                    if *batch_stats {
                        let mut mean_d = vec![0.0; cols];
                        let mut mean_dx = vec![0.0; cols];
                        for i in 0..g.len() {
                            let d = g[i] * gn[i % cols];
                            mean_d[i % cols] += d;
                            mean_dx[i % cols] += d * xhat[i];
                        }
                        mean_d.iter_mut().for_each(|v| *v /= rows as f64);
                        mean_dx.iter_mut().for_each(|v| *v /= rows as f64);
                        for i in 0..g.len() {
                            let j = i % cols;
                            let d = g[i] * gn[j];
                            s[i] += inv_std[j] * (d - mean_d[j] - xhat[i] * mean_dx[j]);
                        }
                    } else {
                        for i in 0..g.len() {
                            let j = i % cols;
                            s[i] += g[i] * gn[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::Dropout(a, scale) => {
                if self.wants(*a) {
                    let s = self.slot(grads, *a);
                    for i in 0..g.len() {
                        s[i] += g[i] * scale[i];
                    }
                }
            }
            &Op::MeanRows(a) => {
                if self.wants(a) {
                    let rows = self.value(a).rows() as f64;
                    let s = self.slot(grads, a);
                    for row in s.chunks_mut(g.len().max(1)) {
                        row.iter_mut().zip(g).for_each(|(s, x)| *s += x / rows);
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                if self.wants(*a) {
                    let cols = g.len();
                    let s = self.slot(grads, *a);
                    for (j, &r) in arg.iter().enumerate() {
                        s[r * cols + j] += g[j];
                    }
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    self.slot(grads, a).iter_mut().for_each(|s| *s += g[0]);
                }
            }
            &Op::Mean(a) => {
                if self.wants(a) {
                    let n = self.value(a).len() as f64;
                    self.slot(grads, a).iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
            &Op::Cosine(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let (na, nb) = (norm(va), norm(vb));
                let c = node.value.item();
                if self.wants(a) {
                    let s = self.slot(grads, a);
                    for i in 0..va.len() {
                        s[i] += g[0] * (vb[i] / (na * nb) - c * va[i] / (na * na));
                    }
                }
                if self.wants(b) {
                    let s = self.slot(grads, b);
                    for i in 0..vb.len() {
                        s[i] += g[0] * (va[i] / (na * nb) - c * vb[i] / (nb * nb));
                    }
                }
            }
            Op::Embedding(table, ids) => {
                if self.wants(*table) {
                    let cols = node.value.cols();
                    let s = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        add_into(self.slot(grads, p), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::SliceRows(a, start) => {
                if self.wants(a) {
                    let cols = node.value.cols();
                    let s = self.slot(grads, a);
                    add_into(&mut s[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let s = self.slot(grads, p);
                        for r in 0..rows {
                            add_into(
                                &mut s[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceCols(a, start) => {
                if self.wants(a) {
                    let cols = self.value(a).cols();
                    let w = node.value.cols();
                    let s = self.slot(grads, a);
                    for r in 0..node.value.rows() {
                        add_into(
                            &mut s[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            &Op::FloorMod(a) => {
                if self.wants(a) {
                    add_into(self.slot(grads, a), g);
                }
            }
            Op::Interp {
                src,
                pos,
                lower,
                upper,
            } => {
                let d = node.value.cols();
                let ps = self.value(*pos).data();
                if self.wants(*src) {
                    let s = self.slot(grads, *src);
                    for idx in 0..lower.len() {
                        let wu = ps[idx] - lower[idx] as f64;
                        let wb = 1.0 - wu;
                        let gr = &g[idx * d..(idx + 1) * d];
                        let (b, u) = (lower[idx], upper[idx]);
                        for c in 0..d {
                            s[b * d + c] += wb * gr[c];
                            s[u * d + c] += wu * gr[c];
                        }
                    }
                }
                if self.wants(*pos) {
                    let sv = self.value(*src);
                    let s = self.slot(grads, *pos);
                    for idx in 0..lower.len() {
                        let gr = &g[idx * d..(idx + 1) * d];
                        let (rb, ru) = (sv.row(lower[idx]), sv.row(upper[idx]));
                        s[idx] += (0..d).map(|c| gr[c] * (ru[c] - rb[c])).sum::<f64>();
                    }
                }
            }
            &Op::GroupDot(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (q, d) = (ta.rows(), ta.cols());
                let n = node.value.cols();
                if self.wants(a) {
                    let s = self.slot(grads, a);
                    for r in 0..q {
                        for i in 0..n {
                            let gi = g[r * n + i];
                            let br = tb.row(r * n + i);
                            for c in 0..d {
                                s[r * d + c] += gi * br[c];
                            }
                        }
                    }
                }
                if self.wants(b) {
                    let s = self.slot(grads, b);
                    for r in 0..q {
                        let ar = ta.row(r);
                        for i in 0..n {
                            let gi = g[r * n + i];
                            let base = (r * n + i) * d;
                            for c in 0..d {
                                s[base + c] += gi * ar[c];
                            }
                        }
                    }
                }
            }
            &Op::GroupWeightedSum(w, v) => {
                let (tw, tv) = (self.value(w), self.value(v));
                let (q, n) = (tw.rows(), tw.cols());
                let d = tv.cols();
                if self.wants(w) {
                    let s = self.slot(grads, w);
                    for r in 0..q {
                        let gr = &g[r * d..(r + 1) * d];
                        for i in 0..n {
                            s[r * n + i] += dot(gr, tv.row(r * n + i));
                        }
                    }
                }
                if self.wants(v) {
                    let s = self.slot(grads, v);
                    for r in 0..q {
                        let gr = &g[r * d..(r + 1) * d];
                        for i in 0..n {
                            let wi = tw.at(r, i);
                            let base = (r * n + i) * d;
                            for c in 0..d {
                                s[base + c] += wi * gr[c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Floored modulo into `[0, m)`, guarding the rounding case where
/// `rem_euclid` returns `m` itself.
pub fn wrap(v: f64, m: f64) -> f64 {
    let r = v.rem_euclid(m);
    if r >= m {
        0.0
    } else {
        r
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
