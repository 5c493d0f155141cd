use serde::{Deserialize, Serialize};

use super::{ensure_finite, Mlp, MlpGrads, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected ADAM moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments mirroring `shapes` (one flat buffer per tensor).
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_mlp(config: AdamConfig, net: &Mlp<T>) -> Self {
        let sizes: Vec<usize> = net.param_shapes().iter().map(|s| s.iter().product()).collect();
        Self::new(config, &sizes)
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape("adam_step", params.len(), (self.first.len(), grads.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("adam_step", p.len(), (g.len(), m.len())));
            }
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let t = self.step as i32;
        let bc1 = one - T::lit(c.beta1.powi(t));
        let bc2 = one - T::lit(c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let (a1, a2) = (one - b1, one - b2);
            let (step_size, inv_bc2) = (lr / bc1, one / bc2);
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + a1 * g;
                *v = b2 * *v + a2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
            ensure_finite("adam_step", p.iter())?;
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp<T>, grads: &MlpGrads<T>) -> Result<()> {
        let g = grads.slices();
        let mut p = net.param_slices_mut();
        self.step(&mut p, &g)
    }
}
