//! AdamW with decoupled weight decay and global-norm clipping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update of every parameter present in `grads`; `lr_of` gives the
    /// learning rate by parameter name. Parameters without a gradient keep
    /// their value and moments.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (ibc1, ibc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let eps = T::lit(c.eps);
        for (name, g) in grads {
            let w = params.get_mut(name)?;
            if w.shape() != g.shape() {
                return Err(Error::DimMismatch {
                    op: "adamw",
                    lhs: w.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let lr = T::lit(lr_of(name));
            let decay = lr * T::lit(c.weight_decay);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m * ibc1;
                let vhat = *v * ibc2;
                *w = *w - decay * *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over every gradient tensor.
pub fn global_norm<T: Scalar>(grads: &IndexMap<String, Tensor<T>>) -> f64 {
    grads.values().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut IndexMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
