use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn zeros_like(params: &[Tensor<F>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
pub fn adam_update<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - cfg.beta1), F::lit(1.0 - cfg.beta2));
    let step_size = F::lit(cfg.lr / bc1);
    let inv_sqrt_bc2 = F::lit(1.0 / bc2.sqrt());
    let eps = F::lit(cfg.eps);
    let decay = F::lit(cfg.lr * cfg.weight_decay);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
            *x = *x - decay * *x - step_size * *mi / denom;
        }
    }
    Ok(())
}
