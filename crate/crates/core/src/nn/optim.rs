use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Per-loss multipliers; a missing entry means 1.
    pub loss_weights: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            lr_decay_every: 100_000,
            lr_decay_factor: 0.1,
            loss_weights: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Invalid("lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weight(&self, name: &str) -> f64 {
        self.loss_weights.get(name).copied().unwrap_or(1.0)
    }
}

/// `lr₀ · factor^⌊step / every⌋`.
pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay_factor.powi((step / cfg.lr_decay_every) as i32)
}

/// Momentum buffers, one per parameter, in store order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn for_params(params: &ParamStore<T>) -> Self {
        Self {
            velocity: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
        }
    }
}

/// `v ← μ·v + g`, `p ← p − lr(step)·v` for every parameter with a gradient.
///
/// `grads[i]` belongs to the i-th parameter of the store; `None` skips it.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut OptimState<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "sgd: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let lr = T::lit(learning_rate_at(cfg, step));
    let mu = T::lit(cfg.momentum);
    for ((p, g), v) in params.tensors_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let Some(g) = g else { continue };
        if g.len() != p.len() || v.len() != p.len() {
            return Err(Error::shape("sgd: gradient/parameter length mismatch".to_string()));
        }
        for ((pv, &gv), vv) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
