use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments keyed by parameter id, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<(String, Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        let moments = store
            .iter()
            .map(|p| {
                (
                    p.id.clone(),
                    Tensor::zeros(p.value.shape()),
                    Tensor::zeros(p.value.shape()),
                )
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay; grads are zeroed afterwards.
///
/// Every parameter must have a finite gradient buffer; a non-finite entry is
/// reported as a missing gradient for that parameter.
pub fn adamw_step(store: &mut ParameterStore, state: &mut OptimizerState) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} parameters, store has {}",
            state.moments.len(),
            store.len()
        )));
    }
    for ((id, _, _), p) in state.moments.iter().zip(store.iter()) {
        if *id != p.id {
            return Err(Error::UnknownParam(p.id.clone()));
        }
        if !p.grad.is_finite() {
            return Err(Error::MissingGrad(p.id.clone()));
        }
    }
    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((_, m, v), p) in state.moments.iter_mut().zip(store.iter_mut()) {
        let grad = p.grad.data().to_vec();
        let value = p.value.data_mut();
        for (((w, &g), mi), vi) in value
            .iter_mut()
            .zip(&grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * weight_decay * *w;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    store.zero_grads();
    Ok(())
}
