use super::layers::Param;
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction. Moments are allocated on the first step and
/// matched to parameters by name afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update from the gradients stored in `params`. Buffers
    /// (non-trainable entries) are skipped.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) -> Result<()> {
        let mut trainable: Vec<&mut Param<T>> = params.into_iter().filter(|p| p.trainable).collect();
        if self.moments.is_empty() {
            self.moments = trainable
                .iter()
                .map(|p| Moments {
                    name: p.name.clone(),
                    m: vec![T::zero(); p.value.len()],
                    v: vec![T::zero(); p.value.len()],
                })
                .collect();
        }
        if self.moments.len() != trainable.len() {
            return Err(Error::shape(
                format!("{} parameter tensors", self.moments.len()),
                trainable.len(),
            ));
        }
        for (p, mo) in trainable.iter().zip(&self.moments) {
            if p.name != mo.name || p.value.len() != mo.m.len() || p.grad.len() != p.value.len() {
                return Err(Error::shape(
                    format!("{} ({} values)", mo.name, mo.m.len()),
                    format!("{} ({} values)", p.name, p.value.len()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let correction1 = T::lit(1.0 - c.beta1.powi(t));
        let correction2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.eps));
        for (p, mo) in trainable.iter_mut().zip(&mut self.moments) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(&mut mo.m).zip(&mut mo.v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
