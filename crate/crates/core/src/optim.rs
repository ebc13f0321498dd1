//! Adam with bias correction and a cosine step-size schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Mat,
    v: Mat,
    t: u64,
}

/// Per-parameter Adam state keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to `param` with step size `lr`.
    pub fn step(&mut self, name: &str, param: &mut Mat, grad: &Mat, lr: f64) {
        assert_eq!(param.dim(), grad.dim(), "adam: gradient shape for {name}");
        let c = self.config;
        let s = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Mat::zeros(param.dim()),
            v: Mat::zeros(param.dim()),
            t: 0,
        });
        s.t += 1;
        let bc1 = 1.0 - c.beta1.powi(s.t as i32);
        let bc2 = 1.0 - c.beta2.powi(s.t as i32);
        ndarray::Zip::from(param)
            .and(&mut s.m)
            .and(&mut s.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + c.eps);
            });
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.t)
    }
}

/// Step size after `step` of `total` steps, decaying from `base` to
/// `base · floor` along a half cosine.
pub fn cosine_lr(base: f64, step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = (step as f64 / (total - 1) as f64).min(1.0);
    let shape = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (floor + (1.0 - floor) * shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Mat::from_elem((1, 3), 1.0);
        let g = ndarray::array![[2.0, -0.5, 0.0]];
        opt.step("w", &mut p, &g, 0.1);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(p[[0, 2]], 1.0);
        assert_eq!(opt.steps_taken("w"), 1);
        assert_eq!(opt.steps_taken("other"), 0);
    }

    #[test]
    fn zero_gradients_leave_parameters_bitwise_unchanged() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Mat::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as f64 * 0.37);
        let before = p.clone();
        for _ in 0..5 {
            opt.step("w", &mut p, &Mat::zeros((2, 2)), 0.01);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = ndarray::array![[3.0, -2.0]];
        for _ in 0..2000 {
            let g = &p * 2.0;
            opt.step("w", &mut p, &g, 0.05);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 11, 0.0), 1.0);
        assert!((cosine_lr(1.0, 5, 11, 0.0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 11, 0.1) - 0.1 < 1e-12);
        assert_eq!(cosine_lr(2.0, 0, 1, 0.0), 2.0);
    }
}
