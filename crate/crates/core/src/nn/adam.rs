//! Adam with decoupled weight decay and an inverse-square-root schedule.

use alloc::vec;
use alloc::vec::Vec;

use super::{Grads, ParamId, Parameters};
use crate::math::{pow, sqrt};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    /// Learning rate at 1-based step `t`: linear warmup then `1/sqrt(t)` decay.
    pub fn lr_at(&self, t: usize) -> f64 {
        let t = t.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        if t <= w {
            self.lr * t / w
        } else {
            self.lr * sqrt(w / t)
        }
    }
}

/// Moment estimates for a subset of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: usize,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &Parameters, ids: Vec<ParamId>) -> Self {
        let m: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; params.tensor(id).data.len()]).collect();
        OptimizerState {
            config,
            step: 0,
            v: m.clone(),
            m,
            ids,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Global L2 norm of the gradients this optimizer owns.
    pub fn grad_norm(&self, grads: &Grads) -> f64 {
        sqrt(
            self.ids
                .iter()
                .map(|&id| grads.get(id).iter().map(|g| g * g).sum::<f64>())
                .sum(),
        )
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut Parameters, grads: &Grads) -> f64 {
        self.step += 1;
        let c = self.config;
        let norm = self.grad_norm(grads);
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - pow(c.beta2, self.step as f64);
        for (slot, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let w = &mut params.tensor_mut(id).data;
            for e in 0..w.len() {
                let ge = g[e] * scale;
                m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * ge;
                v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * ge * ge;
                let mh = m[e] / bc1;
                let vh = v[e] / bc2;
                w[e] -= lr * (mh / (sqrt(vh) + c.eps) + c.weight_decay * w[e]);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_after_warmup() {
        let c = AdamConfig {
            lr: 0.01,
            warmup_steps: 4,
            ..AdamConfig::default()
        };
        assert_eq!(c.lr_at(1), 0.0025);
        assert_eq!(c.lr_at(4), 0.01);
        assert_eq!(c.lr_at(16), 0.005);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut p = Parameters::new();
        let id = p.add("w", 1, 2, vec![1.0, -1.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            warmup_steps: 1,
            eps: 0.0,
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &p, vec![id]);
        let mut g = Grads::zeros_like(&p);
        g.get_mut(id).copy_from_slice(&[3.0, -0.5]);
        opt.update(&mut p, &g);
        let w = &p.tensor(id).data;
        assert!((w[0] - 0.9).abs() < 1e-12);
        assert!((w[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Parameters::new();
        let id = p.add("w", 1, 3, vec![2.0, -3.0, 0.5]);
        let cfg = AdamConfig {
            lr: 0.05,
            warmup_steps: 1,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &p, vec![id]);
        let mut g = Grads::zeros_like(&p);
        for _ in 0..3000 {
            let w = p.tensor(id).data.clone();
            g.get_mut(id).iter_mut().zip(&w).for_each(|(gi, wi)| *gi = 2.0 * wi);
            opt.update(&mut p, &g);
        }
        assert!(p.tensor(id).data.iter().all(|w| w.abs() < 1e-2));
    }
}
