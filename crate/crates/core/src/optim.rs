//! Adaptive-moment optimizer with decoupled weight decay, the warmup plus
//! cosine learning-rate schedule, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments, shaped like the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied so far.
    pub steps: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            steps: 0,
        }
    }

    /// One bias-corrected update. Decay is applied to the parameters
    /// directly (`θ ← θ − lr·wd·θ`), not folded into the gradient.
    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: T, cfg: &AdamWConfig) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.steps += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let eps = T::of(cfg.eps);
        let wd = T::of(cfg.weight_decay);
        let n = self.steps as i32;
        let c1 = T::one() - b1.powi(n);
        let c2 = T::one() - b2.powi(n);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            let p = params[i];
            params[i] = p - lr * (mhat / (vhat.sqrt() + eps) + wd * p);
        }
    }
}

/// Linear warmup from 0 to `base` over `warmup_frac · total` steps, then
/// cosine annealing down to 0 at `total`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * total as f64).round() as usize;
    if step < warm {
        return base * step as f64 / warm as f64;
    }
    if total <= warm {
        return base;
    }
    let progress = (step.min(total) - warm) as f64 / (total - warm) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm<T: Real>(grad: &[T]) -> T {
    grad.iter().map(|&g| g * g).sum::<T>().sqrt()
}

/// Rescales `grad` so its norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Real>(grad: &mut [T], max_norm: T) -> T {
    let norm = global_norm(grad);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}
