//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One update of a flat buffer; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::dim("adam_step", &[grad.len()], &[param.len()]));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Applies the accumulated gradients of `params` and advances the step.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::dim("adam_step", &[state.m.len()], &[params.len()]));
    }
    state.step += 1;
    let t = state.step;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        if state.m[i].shape() != params.value(id).shape() {
            return Err(Error::dim(
                "adam_step",
                state.m[i].shape(),
                params.value(id).shape(),
            ));
        }
        let grad = params.grad(id).data().to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        adam_update(
            params.value_mut(id).data_mut(),
            &grad,
            m.data_mut(),
            v.data_mut(),
            t,
            lr,
            cfg,
        )?;
    }
    Ok(())
}
