//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Adam { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated `grad` of every parameter.
    /// Non-finite gradients abort before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFinite { op: format!("gradient of {}", p.name) });
        }
        self.t += 1;
        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            adam_step(
                p.value_mut().data_mut(),
                &grad,
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                &self.config,
                self.t,
            )?;
        }
        Ok(())
    }
}

/// One Adam update of `params` in place; `t` is the 1-based step number.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Usage("adam step counter starts at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: format!("gradient element {i}") });
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = [1.5, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, &cfg(0.1), t).unwrap();
        }
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_step(&mut p, &[1.0], &mut m, &mut v, &cfg(0.1), 1).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let mut reached = None;
        for t in 1..=500 {
            let g = [2.0 * p[0]];
            adam_step(&mut p, &g, &mut m, &mut v, &cfg(0.05), t).unwrap();
            if p[0].abs() < 1e-2 && reached.is_none() {
                reached = Some(t);
            }
        }
        assert!(reached.is_some(), "final p = {}", p[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let err = adam_step(&mut p, &[f64::NAN], &mut m, &mut v, &cfg(0.1), 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p, [1.0]);
        assert!(adam_step(&mut p, &[1.0], &mut m, &mut v, &cfg(0.1), 0).is_err());
    }
}
