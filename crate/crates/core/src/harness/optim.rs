use crate::model::{ParamId, ParamStore};
use crate::numerics::Tensor;

/// Adam with coupled (L2) weight decay: the decay term is added to the
/// gradient before the moment updates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from `(parameter, gradient)` pairs. Parameters without a
    /// gradient keep their moments unchanged.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let p = params.get_mut(*id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g.data()[k] + self.weight_decay * p[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the rate by `factor` once the monitored score has failed to
/// strictly improve for more than `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records an epoch score (higher is better) and returns the new rate.
    pub fn observe(&mut self, score: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
