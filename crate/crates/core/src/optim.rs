//! SGD with momentum and L2 weight decay, plus cosine annealing.

use alloc::vec::Vec;

use crate::autograd::Gradients;
use crate::error::{bail, Result};
use crate::math;
use crate::nn::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be >= 0, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "weight decay must be >= 0, got {}", self.weight_decay);
        }
        Ok(())
    }
}

/// `lr_t = lr_0 · (1 + cos(π t / T)) / 2` for step `t` of `T`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + math::cos(core::f64::consts::PI * t))
}

/// Heavy-ball SGD over the trainable parameters of a store.
///
/// ```text
/// d = ∇θ + λθ
/// v ← μv + d        (v = d on the first step)
/// θ ← θ − lr·v
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    params: Vec<ParamId>,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, config: SgdConfig) -> Result<Self> {
        config.validate()?;
        let params: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let velocity = params.iter().map(|_| None).collect();
        Ok(Self {
            config,
            params,
            velocity,
        })
    }

    /// Apply one update at learning rate `lr`. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for (slot, &id) in self.velocity.iter_mut().zip(&self.params) {
            let param = store.get_mut(id);
            let theta = param.tensor.data_mut();
            let grad = grads.get(bound.var(id));
            let d: Vec<f64> = match grad {
                Some(g) => g.iter().zip(theta.iter()).map(|(g, t)| g + wd * t).collect(),
                None => theta.iter().map(|t| wd * t).collect(),
            };
            let v = match slot {
                Some(v) => {
                    v.iter_mut().zip(&d).for_each(|(v, d)| *v = mu * *v + d);
                    v
                }
                None => slot.insert(d),
            };
            theta.iter_mut().zip(v.iter()).for_each(|(t, v)| *t -= lr * v);
        }
    }
}
