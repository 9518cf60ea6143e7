//! SGD with momentum and L2 weight decay, plus step-decay learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffers, one per parameter in the order parameters are passed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T: Scalar> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }
}

/// One update of every `(parameter, decays)` pair:
///
/// ```text
/// g ← grad + weight_decay · param   (only where `decays`)
/// v ← momentum · v + g
/// param ← param − lr · v
/// ```
///
/// A parameter the loss never reached counts as having zero gradient. Each
/// parameter is replaced by a fresh tracked leaf, which also clears its
/// gradient.
pub fn sgd_step<T: Scalar>(params: Vec<(&mut Tensor<T>, bool)>, state: &mut SgdState<T>, cfg: &SgdConfig) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|(p, _)| vec![T::zero(); p.numel()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::config(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let lr = T::of(cfg.lr);
    let mu = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    for ((param, decays), v) in params.into_iter().zip(state.velocity.iter_mut()) {
        if v.len() != param.numel() {
            return Err(Error::config(format!(
                "velocity of length {} for parameter of shape {:?}",
                v.len(),
                param.shape()
            )));
        }
        let grad = param.grad().unwrap_or_else(|| vec![T::zero(); param.numel()]);
        let updated: Vec<T> = param
            .data()
            .iter()
            .zip(grad)
            .zip(v.iter_mut())
            .map(|((&p, g), vel)| {
                let g = if decays { g + wd * p } else { g };
                *vel = mu * *vel + g;
                p - lr * *vel
            })
            .collect();
        *param = Tensor::param(updated, param.shape())?;
    }
    Ok(())
}

/// Step decay: `base · factor^k` where `k` counts the milestones reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "one")]
    pub factor: f64,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    /// Learning rate for zero-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::param(v.to_vec(), &[v.len()]).unwrap()
    }

    fn set_grad(p: &Tensor<f64>, g: &[f64]) {
        // loss = Σ g_i · p_i has gradient g.
        let gt = Tensor::from_vec(g.to_vec(), &[g.len()]).unwrap();
        p.mul(&gt).unwrap().sum().backward().unwrap();
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut p = param(&[1.0, -2.0]);
        set_grad(&p, &[0.5, 1.0]);
        let mut st = SgdState::new();
        sgd_step(vec![(&mut p, true)], &mut st, &SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1]);
        assert!(p.grad().is_none() && p.is_tracked());
    }

    #[test]
    fn two_momentum_steps_with_constant_gradient() {
        // v1 = g, v2 = μg + g, total = -lr·g·(2 + μ)
        let (lr, mu, g) = (0.1, 0.9, 0.5);
        let mut p = param(&[0.0]);
        let mut st = SgdState::new();
        for _ in 0..2 {
            set_grad(&p, &[g]);
            sgd_step(vec![(&mut p, true)], &mut st, &SgdConfig { lr, momentum: mu, weight_decay: 0.0 }).unwrap();
        }
        assert!((p.data()[0] - (-lr * g * (2.0 + mu))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_toward_zero_only_where_enabled() {
        let mut w = param(&[2.0, -3.0]);
        let mut b = param(&[2.0]);
        let mut st = SgdState::new();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5 };
        sgd_step(vec![(&mut w, true), (&mut b, false)], &mut st, &cfg).unwrap();
        assert_eq!(w.data(), &[1.9, -2.85]);
        assert_eq!(b.data(), &[2.0]);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut p = param(&[0.1, 0.2]);
        set_grad(&p, &[3.0, -4.0]);
        let mut st = SgdState::new();
        sgd_step(vec![(&mut p, true)], &mut st, &SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 5e-4 }).unwrap();
        assert_eq!(p.data(), &[0.1, 0.2]);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = param(&[1.0]);
        let mut st = SgdState { velocity: vec![vec![0.0; 2]] };
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!(sgd_step(vec![(&mut p, true)], &mut st, &cfg).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule { base: 0.1, milestones: vec![30, 40], factor: 0.1 };
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(29), 0.1);
        assert!((s.at(30) - 0.01).abs() < 1e-15);
        assert!((s.at(45) - 0.001).abs() < 1e-15);
        assert_eq!(LrSchedule::constant(0.001).at(1000), 0.001);
    }
}
