//! Adam, global-norm clipping, plateau LR decay and early stopping.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type GradMap<T> = HashMap<ParamId, Tensor<T>>;

/// Adds `src` into `acc`, allocating entries on first sight.
pub fn accumulate<T: Scalar>(acc: &mut GradMap<T>, src: HashMap<ParamId, Tensor<T>>) {
    for (id, g) in src {
        match acc.get_mut(&id) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y),
            None => {
                acc.insert(id, g);
            }
        }
    }
}

pub fn scale_grads<T: Scalar>(grads: &mut GradMap<T>, s: f64) {
    let s = T::from_f64_lossy(s);
    grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = *v * s));
}

/// Summed in parameter-id order so the result is reproducible.
pub fn global_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    let mut ids: Vec<&ParamId> = grads.keys().collect();
    ids.sort();
    ids.iter().flat_map(|id| grads[id].data()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Rescales so the global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut GradMap<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        // shrink a hair below the bound so rounding cannot land above it
        scale_grads(grads, max_norm / norm * (1.0 - 1e-6));
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments indexed by parameter id.
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of every non-frozen parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) {
        self.step += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort();
        for &id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let g = &grads[&id];
            let shape = g.shape().to_vec();
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for i in 0..g.numel() {
                let gi = g.data()[i].to_f64_lossy();
                let mi = self.beta1 * m.data()[i].to_f64_lossy() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i].to_f64_lossy() + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = T::from_f64_lossy(mi);
                v.data_mut()[i] = T::from_f64_lossy(vi);
                let upd = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pi = p.data()[i].to_f64_lossy() - upd;
                p.data_mut()[i] = T::from_f64_lossy(pi);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement of a lower-is-better metric.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, best: f64::INFINITY, bad: 0 }
    }

    /// Returns the new learning rate.
    pub fn observe(&mut self, value: f64, lr: f64) -> f64 {
        if value < self.best {
            self.best = value;
            self.bad = 0;
            lr
        } else {
            self.bad += 1;
            if self.bad > self.patience {
                self.bad = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

/// Stops once `patience` epochs pass without a new best.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    epochs_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopVerdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, epochs_seen: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopVerdict {
        self.epochs_seen += 1;
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.best_epoch = epoch;
        }
        StopVerdict { improved, stop: epoch - self.best_epoch >= self.patience }
    }
}
