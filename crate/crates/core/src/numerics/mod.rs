//! Dense `f64` tensors, a reverse-mode tape, and a central-difference
//! gradient oracle.

mod graph;
mod tensor;

pub use graph::{
    wrap, BatchNormMode, Gradients, Graph, RunningStats, Var, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
};
pub use tensor::Tensor;


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("data length {got} does not match shape size {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("batch_norm in train mode needs at least two rows; variance is undefined for one")]
    BatchNormSingleRow,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: row {row} has every entry masked")]
    AllMasked { op: &'static str, row: usize },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("{op}: {detail}")]
    OutOfRange { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

/// Central-difference gradient of a scalar function at `point`:
/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, point: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Normwise relative error `max|a - b| / max|b|`, with the denominator
/// floored at `1e-12` so an all-zero reference reduces to absolute error.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.max_abs_diff(b);
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    diff / scale
}

#[cfg(test)]
mod tests;
