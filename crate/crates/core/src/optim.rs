//! Adam with global-norm gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::real::{m, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected update of `params` against `grads`.
    pub fn update<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let c1 = 1.0 - m::powi(self.beta1, self.step);
        let c2 = 1.0 - m::powi(self.beta2, self.step);
        let step_size = (lr * m::sqrt(c2) / c1) as f32;
        let eps = (self.eps * m::sqrt(c2)) as f32;
        for i in 0..params.len() {
            let g = grads[i].to_f64() as f32;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let upd = step_size * self.m[i] / (sqrt32(self.v[i]) + eps);
            params[i] -= T::from_f64(upd as f64);
        }
    }
}

#[inline]
fn sqrt32(x: f32) -> f32 {
    <f32 as Real>::sqrt(x)
}

/// L2 norm of `grads`.
pub fn global_norm<T: Real>(grads: &[T]) -> f64 {
    m::sqrt(grads.iter().map(|g| g.to_f64() * g.to_f64()).sum())
}

/// Scale `grads` so their L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads {
            *g *= s;
        }
    }
    norm
}

/// Linear warmup then cosine decay to `min_frac * lr`.
pub fn lr_schedule(lr: f64, step: usize, total: usize, warmup: usize, min_frac: f64) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + m::cos(core::f64::consts::PI * t));
    lr * (min_frac + (1.0 - min_frac) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_against_the_sign() {
        let mut a = Adam::new(2);
        let mut p = [1.0f32, -1.0];
        a.update(&mut p, &[0.5f32, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = [3.0f64, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = [0.1f64];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, [0.1]);
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        assert!((lr_schedule(1.0, 0, 100, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!((lr_schedule(1.0, 10, 100, 10, 0.1) - 1.0).abs() < 1e-12);
        assert!((lr_schedule(1.0, 100, 100, 10, 0.1) - 0.1).abs() < 1e-12);
    }
}
