//! Adam optimizer with a step-halving learning-rate schedule.

use super::tensor::{GradSet, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, aligned index-wise with the [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            t: 0,
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect(),
        }
    }
}

/// One Adam update over every trainable parameter. Deterministic: iteration
/// order is the registration order, no randomness anywhere.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradSet,
    state: &mut AdamState,
    lr: f32,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    for (idx, (param, grad)) in params.iter_mut().zip(grads.iter()).enumerate() {
        if !param.trainable {
            continue;
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = param.tensor.data_mut();
        for ((pv, gv), (mv, vv)) in p
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv as f64 / bc1;
            let v_hat = *vv as f64 / bc2;
            *pv -= (lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
}

/// Learning rate after `epoch` epochs when halving every `halve_every` epochs.
pub fn scheduled_lr(lr0: f64, epoch: usize, halve_every: usize) -> f64 {
    assert!(halve_every >= 1);
    lr0 * 0.5f64.powi((epoch / halve_every) as i32)
}
