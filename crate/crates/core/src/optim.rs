//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use crate::params::{GradBuffer, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(0),
            v: zeros(1),
        }
    }

    /// One update of every trainable parameter at `lr` times its scale. Decay
    /// multiplies the weight by `1 − lr·wd` before the adaptive step and only
    /// touches parameters flagged for decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (k, (p, g)) in store.params_mut().iter_mut().zip(grads.iter()).enumerate() {
            if !p.trainable {
                continue;
            }
            let lr = lr * p.lr_scale;
            let decay = if p.decay { 1.0 - lr * wd } else { 1.0 };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w = *w * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step.min(total_steps) - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gumbel temperature at the start and end of an annealed run.
pub const TAU_START: f64 = 5.0;
pub const TAU_END: f64 = 0.5;

/// Linear temperature anneal from `TAU_START` at step 0 to `TAU_END` at the last step.
pub fn annealed_tau(step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return TAU_END;
    }
    let progress = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    TAU_START + (TAU_END - TAU_START) * progress
}
