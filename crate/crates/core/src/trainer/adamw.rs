use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
///
/// Missing gradients count as zero. Decay applies only to parameters the
/// store marks as decaying (matrices and tables).
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), NumericsError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NumericsError::Shape(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, id) in params.ids().enumerate() {
        let shape = params.get(id).shape();
        if state.m[i].shape() != shape || state.v[i].shape() != shape || grads[i].as_ref().is_some_and(|g| g.shape() != shape) {
            return Err(NumericsError::Shape(format!("adamw: shape mismatch for {}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let shrink = T::one() - T::lit(cfg.lr * cfg.weight_decay);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let decays = params.decays(id) && cfg.weight_decay != 0.0;
        let p = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].as_ref().map(|g| g.data());
        for j in 0..p.len() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            if decays {
                p[j] *= shrink;
            }
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| g.scale_assign(s));
    }
    norm
}
