use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update. Gradients are zeroed afterward.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.value.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        if m.len() != p.value.len() {
            return Err(Error::InvalidArgument(format!(
                "moment size {} does not match parameter `{}`",
                m.len(),
                p.name
            )));
        }
        let (data, grad) = p.value.data_and_grad_mut();
        let grad = grad.expect("checked above");
        for (((w, g), m), v) in data
            .iter_mut()
            .zip(grad.iter_mut())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gf = g.as_f64();
            let mf = beta1 * m.as_f64() + (1.0 - beta1) * gf;
            let vf = beta2 * v.as_f64() + (1.0 - beta2) * gf * gf;
            *m = T::of(mf);
            *v = T::of(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
            *w = T::of(w.as_f64() - update);
            *g = T::zero();
        }
    }
    Ok(())
}
