use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::net::ParamStore;
use super::tape::ParamId;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        OptimState {
            m: params.values.iter().map(Tensor::zeros_like).collect(),
            v: params.values.iter().map(Tensor::zeros_like).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradients of `params` pulled out of a tape's map, zero where absent.
pub fn gather(params: &ParamStore, grads: &BTreeMap<ParamId, Tensor>) -> Vec<Tensor> {
    params
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| grads.get(&params.id(i)).cloned().unwrap_or_else(|| v.zeros_like()))
        .collect()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(f);
        }
    }
    norm
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Domain(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(&params.values).enumerate() {
        if g.shape != p.shape {
            return Err(Error::Domain(format!(
                "gradient of `{}` has shape {:?}, parameter {:?}",
                params.names[i], g.shape, p.shape
            )));
        }
        if let Some(bad) = g.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Training {
                param: params.names[i].clone(),
                msg: format!("non-finite gradient value {bad}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .values
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
            v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
            let mh = m.data[k] / c1;
            let vh = v.data[k] / c2;
            p.data[k] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}
