//! AdamW with decoupled weight decay, and early stopping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("adam eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Whether weight decay applies to a parameter. Biases, norm affines and
/// layer scales are vectors and are left alone.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub hyper: AdamWConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(hyper: AdamWConfig) -> Self {
        OptimState { step: 0, hyper, moments: BTreeMap::new() }
    }

    /// One AdamW step over every parameter of `params`. `grads` must name
    /// exactly the same parameters with the same shapes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.hyper.validate()?;
        if !(lr >= 0.0) {
            return Err(Error::contract(format!("learning rate must be >= 0, got {lr}")));
        }
        if let Some(extra) = grads.keys().find(|k| params.get(k).is_none()) {
            return Err(Error::contract(format!("gradient for unknown parameter {extra}")));
        }
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(mo) = self.moments.get(name) {
                if mo.m.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "optimizer moments for {name} have shape {:?}, parameter is {:?}",
                        mo.m.shape(),
                        p.shape()
                    )));
                }
            }
        }

        self.step += 1;
        let hyper = self.hyper;
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let decay = decays(p.shape());
            adamw_update(p.data_mut(), g.data(), mo.m.data_mut(), mo.v.data_mut(), self.step, &hyper, decay, lr);
        }
        Ok(())
    }
}

/// The AdamW law on flat slices at step `t` (1-based):
/// `m ← β₁m+(1−β₁)g`, `v ← β₂v+(1−β₂)g²`,
/// `p ← p − lr·(m̂/(√v̂+eps) + λp)` with bias-corrected `m̂`, `v̂`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    hyper: &AdamWConfig,
    decay: bool,
    lr: f64,
) {
    let AdamWConfig { beta1: b1, beta2: b2, eps, weight_decay } = *hyper;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let wd = if decay { weight_decay } else { 0.0 };
    for i in 0..p.len() {
        let gi = g[i].to_f64();
        let mi = b1 * m[i].to_f64() + (1.0 - b1) * gi;
        let vi = b2 * v[i].to_f64() + (1.0 - b2) * gi * gi;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let x = p[i].to_f64();
        p[i] = T::from_f64(x - lr * ((mi / c1) / ((vi / c2).sqrt() + eps) + wd * x));
    }
}

/// Stops once validation MAE has failed to strictly improve for `patience`
/// consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_val_mae: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState { best_val_mae: f64::INFINITY, epochs_since_improvement: 0, patience }
    }

    /// Records one epoch; returns whether training should stop.
    pub fn update(&mut self, val_mae: f64) -> bool {
        if val_mae < self.best_val_mae {
            self.best_val_mae = val_mae;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.should_stop()
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.epochs_since_improvement >= self.patience
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new(3)
    }
}
