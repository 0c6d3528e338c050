//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Step at which the cosine schedule reaches zero.
    pub horizon: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1.25e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            horizon: 2000,
        }
    }
}

/// `base * 0.5 * (1 + cos(pi * step / horizon))`; steps past the horizon
/// stay at the final rate.
pub fn cosine_lr(base: f64, step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return base;
    }
    let t = step.min(horizon) as f64 / horizon as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: usize,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
        Self {
            cfg,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.cfg.lr, self.step, self.cfg.horizon)
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`, or
    /// `None` when no gradient reached it (treated as zero). Frozen sets are
    /// left untouched. Weight decay skips one-dimensional tensors (biases,
    /// adapter scale and shift).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<&[T]>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::shape("adamw_step", params.len(), grads.len()));
        }
        if params.is_frozen() {
            return Ok(());
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr_t = T::of(lr);
        let eps = T::of(self.cfg.eps);
        let wd = T::of(self.cfg.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let decay = params.get(i).shape().len() >= 2;
            let p = params.get_mut(i).expect("not frozen").data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                if decay {
                    p[j] -= lr_t * wd * p[j];
                }
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.25e-4, 0, 100), 1.25e-4);
        assert!(cosine_lr(1.25e-4, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(2.0, 50, 100) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_lr(2.0, 500, 100), cosine_lr(2.0, 100, 100));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("b", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.1,
            horizon: 0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        let g = [3.0, -0.5];
        opt.step(&mut ps, &[Some(&g)]).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps).
        let d = ps.get(0).data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_applies_to_matrices_only() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("w", Tensor::full([1, 1], 2.0));
        ps.add("b", Tensor::full([1], 2.0));
        let cfg = AdamWConfig {
            lr: 0.5,
            weight_decay: 0.1,
            horizon: 0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[None, None]).unwrap();
        assert!((ps.get(0).item() - 1.9).abs() < 1e-12);
        assert_eq!(ps.get(1).item(), 2.0);
    }

    #[test]
    fn frozen_set_is_bitwise_unchanged() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("w", Tensor::full([2, 2], 0.3));
        ps.freeze();
        let before = ps.checksum();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        let g = [1.0; 4];
        opt.step(&mut ps, &[Some(&g)]).unwrap();
        assert_eq!(ps.checksum(), before);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let mut ps: ParamSet<f64> = ParamSet::new();
            ps.add("w", Tensor::from_fn([3, 2], |i| i as f64 * 0.1));
            let mut opt = AdamW::new(AdamWConfig { lr: 0.01, ..Default::default() }, &ps);
            for s in 0..20 {
                let g: Vec<f64> = (0..6).map(|i| ((s * 7 + i) as f64).sin()).collect();
                opt.step(&mut ps, &[Some(&g)]).unwrap();
            }
            ps.checksum()
        };
        assert_eq!(run(), run());
    }
}
