//! Adam with per-tensor state, so tensors can be stepped independently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// One moment pair and step counter per registered tensor. A slot that is
/// not stepped keeps its tensor bit-identical.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            slots: sizes
                .into_iter()
                .map(|n| Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                })
                .collect(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step<T: Element>(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        let c = self.config;
        let s = self
            .slots
            .get_mut(slot)
            .ok_or_else(|| Error::Index(format!("optimizer slot {slot} not registered")))?;
        if param.shape() != grad.shape() || param.len() != s.m.len() {
            return Err(Error::Shape(format!(
                "optimizer slot {slot}: param {:?}, grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        s.t += 1;
        let bc1 = 1.0 - c.beta1.powi(s.t);
        let bc2 = 1.0 - c.beta2.powi(s.t);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(&mut s.m)
            .zip(&mut s.v)
        {
            let g = g.as_f64();
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            *p = T::from_f64_lossy(p.as_f64() - update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), [3]).unwrap();
        let mut p = Tensor::<f64>::from_f64(vec![3], &[1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::from_f64(vec![3], &[2.0, -0.5, 0.0]).unwrap();
        adam.step(0, &mut p, &g).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), [2]).unwrap();
        let mut p = Tensor::<f64>::from_f64(vec![2], &[3.0, -2.0]).unwrap();
        for _ in 0..2000 {
            let g = p.map(|v| 2.0 * v);
            adam.step(0, &mut p, &g).unwrap();
        }
        assert!(p.norm() < 1e-3);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(Adam::new(AdamConfig::with_lr(0.0), [1]).is_err());
        let mut adam = Adam::new(AdamConfig::default(), [2]).unwrap();
        let mut p = Tensor::<f64>::zeros(vec![3]);
        assert!(adam.step(0, &mut p, &Tensor::zeros(vec![3])).is_err());
        assert!(adam.step(1, &mut p, &Tensor::zeros(vec![3])).is_err());
    }
}
