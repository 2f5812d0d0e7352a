//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::Visit;
use crate::error::{ensure, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "adam betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, "adam eps must be positive");
        Ok(())
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(config: AdamConfig, step: u64, slots: BTreeMap<String, Moments<T>>) -> Result<Self> {
        let mut a = Self::new(config)?;
        a.step = step;
        a.slots = slots;
        Ok(a)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &BTreeMap<String, Moments<T>> {
        &self.slots
    }

    /// One update of every trainable parameter that holds a gradient.
    ///
    /// `theta -= lr * m_hat / (sqrt(v_hat) + eps)` with
    /// `m_hat = m / (1 - beta1^t)` and `v_hat = v / (1 - beta2^t)`.
    pub fn step(&mut self, model: &mut impl Visit<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let slots = &mut self.slots;
        model.visit_mut("", &mut |name, p| {
            if !p.is_trainable() || p.grad().is_empty() {
                return;
            }
            let n = p.len();
            let slot = slots.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let (value, grad) = p.value_mut_and_grad();
            for i in 0..n {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + ob1 * g;
                slot.v[i] = b2 * slot.v[i] + ob2 * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Param, ParamKind};

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::<f64>::new(cfg).unwrap();
        let mut p = Param::new(&[2], vec![1.0, -1.0], ParamKind::Trainable);
        p.grad_mut().copy_from_slice(&[3.0, -0.5]);
        adam.step(&mut p);
        // With bias correction the first step is lr * g / (|g| + eps).
        assert!((p.value[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((p.value[1] - (-1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn buffers_and_gradless_params_untouched() {
        let mut adam = Adam::<f64>::new(AdamConfig::default()).unwrap();
        let mut b = Param::new(&[1], vec![5.0], ParamKind::Buffer);
        b.grad_mut()[0] = 1.0;
        adam.step(&mut b);
        assert_eq!(b.value[0], 5.0);
        let mut fresh = Param::new(&[1], vec![2.0], ParamKind::Trainable);
        adam.step(&mut fresh);
        assert_eq!(fresh.value[0], 2.0);
        assert!(adam.slots().is_empty());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = AdamConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(Adam::<f32>::new(bad).is_err());
    }
}
