use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.008,
            beta1: 0.91,
            beta2: 0.9993,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("adam epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam moments for every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        })
    }

    /// One bias-corrected Adam update. All gradients are checked before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    param: name.to_string(),
                    reason: "non-finite gradient".into(),
                });
            }
        }
        self.step_count += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, lr, eps) = (T::one(), T::of(c.lr), T::of(c.epsilon));
        let t = self.step_count as i32;
        let bc1 = one - T::of(c.beta1.powi(t));
        let bc2 = one - T::of(c.beta2.powi(t));
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
