//! Adam with decoupled weight decay, and the warmup + cosine learning-rate
//! curve used by the training driver.

use std::f64::consts::PI;

use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Whether a parameter is subject to weight decay: matrices only, excluding
/// the class token, position embeddings and relative-bias tables.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && name != "cls_token" && name != "pos_embed" && !name.ends_with("rel_bias")
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        AdamW {
            config,
            step: 0,
            m: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            decay: store.iter().map(|p| decays(&p.name, p.value.shape())).collect(),
        }
    }

    /// One update at learning rate `lr`, then zeroes the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        // per-step coefficients in f64, rounded once to T
        let cast = T::from_f64_lossy;
        let (b1, nb1) = (cast(c.beta1), cast(1.0 - c.beta1));
        let (b2, nb2) = (cast(c.beta2), cast(1.0 - c.beta2));
        let inv_bc1 = cast(1.0 / (1.0 - c.beta1.powi(t)));
        let inv_bc2 = cast(1.0 / (1.0 - c.beta2.powi(t)));
        let lr_t = cast(lr);
        let eps = cast(c.eps);
        let decay_rate = cast(lr * c.weight_decay);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if self.decay[i] { decay_rate } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + nb1 * g[j];
                v[j] = b2 * v[j] + nb2 * g[j] * g[j];
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                *w = *w - decay * *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
    }
}

/// Linear warmup to `peak` over `warmup` iterations, then cosine decay to
/// `floor` at iteration `total`.
pub fn lr_at(iter: usize, total: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if iter < warmup {
        return peak * (iter + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((iter - warmup) as f64 / span as f64).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (PI * progress).cos())
}
