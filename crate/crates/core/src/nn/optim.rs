use std::collections::BTreeMap;

use super::ParamStore;
use crate::autograd::Tensor;

/// Teacher update `θ′ ← m·θ′ + (1 − m)·θ` over every teacher tensor that the
/// student also holds.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) {
    for (name, t) in teacher.tensors.iter_mut() {
        let Some(s) = student.try_get(name) else {
            continue;
        };
        for (a, b) in t.data.iter_mut().zip(&s.data) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay. Decay applies to
/// tensors whose name ends in `.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.tensors.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .tensors
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self
                .v
                .tensors
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let decay = if name.ends_with(".weight") { weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * p.data[i]);
            }
        }
    }
}
