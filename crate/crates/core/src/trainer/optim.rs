use std::collections::HashMap;

use crate::autograd::{Gradients, ParamGroup, ParamId, ParamStore, Tensor};

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Learning rate for the zero-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-group learning-rate multipliers (default 1).
    pub lr_mult: HashMap<ParamGroup, f64>,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Biases, scalars and the logit scale are not decayed.
fn decays(store: &ParamStore, id: ParamId) -> bool {
    store.get(id).shape().len() >= 2 && store.group(id) != ParamGroup::LogitScale
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr_mult: HashMap::new(),
            t: 0,
            m: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
            v: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    /// Gradient tensors in store order, with zeros for parameters without one.
    pub fn collect(store: &ParamStore, grads: &Gradients) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        for (id, g) in grads.params() {
            if let Some(g) = g {
                out[id.0].add_assign(g);
            }
        }
        out
    }

    pub fn global_norm(grads: &[Tensor]) -> f64 {
        grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let lr_i = lr * self.lr_mult.get(&store.group(id)).copied().unwrap_or(1.0);
            let wd = if decays(store, id) { self.weight_decay } else { 0.0 };
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr_i * (mh / (vh.sqrt() + self.eps) + wd * p[j]);
            }
        }
    }
}
