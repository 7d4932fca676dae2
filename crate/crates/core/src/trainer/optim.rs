//! AdamW with decoupled weight decay, the warmup-cosine schedule, and
//! global-norm gradient clipping.

use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates for one store, entry for entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Moments {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let z: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// Sum of squares of every present gradient.
pub fn grad_sq_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum()
}

pub fn grads_finite(store: &ParamStore) -> bool {
    store.iter().filter_map(|p| p.grad.as_ref()).all(|g| g.all_finite())
}

pub fn scale_grads(store: &mut ParamStore, s: f64) {
    for p in store.iter_mut() {
        if let Some(g) = &mut p.grad {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}

/// Scale all gradients so their joint norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = stores.iter().map(|s| grad_sq_norm(s)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for st in stores.iter_mut() {
            scale_grads(st, s);
        }
    }
    norm
}

/// One AdamW update at step `t` (1-based). Entries flagged for decay are
/// first shrunk by `1 - lr * wd`; then the bias-corrected adaptive step is
/// applied. A missing gradient counts as zero.
pub fn adamw_step(store: &mut ParamStore, moments: &mut Moments, lr: f64, t: u64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let shrink = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let m = moments.m[i].data_mut();
        let v = moments.v[i].data_mut();
        let grad = p.grad.as_ref().map(|g| g.data());
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then half-cosine
/// decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, warmup: u64, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
