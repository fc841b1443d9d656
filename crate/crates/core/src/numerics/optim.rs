use std::f64::consts::PI;

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are kept per parameter
/// slot; callers address parameters by a stable index.
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// any [`AdamW::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to parameter `slot`. `decay` selects whether weight
    /// decay applies to this parameter.
    pub fn update(
        &mut self,
        slot: usize,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        lr: f64,
        decay: bool,
    ) -> Result<()> {
        if param.shape() != grad.shape() || self.first[slot].len() != param.numel() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if self.step == 0 {
            return Err(Error::contract("AdamW::update before begin_step"));
        }
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let shrink = T::of(if decay { 1.0 - lr * c.weight_decay } else { 1.0 });
        let m = &mut self.first[slot];
        let v = &mut self.second[slot];
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            let denom = (*vi * inv_bc2).sqrt() + eps;
            *p = *p * shrink - step_size * *mi / denom;
        }
        param.ensure_finite("adamw")
    }
}

/// Linear warmup followed by cosine decay to 10% of the base rate.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup.min(total)).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = 0.1 * base;
    floor + (base - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Rescales the gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
