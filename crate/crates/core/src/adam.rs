//! Adam parameter updates with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, NetworkParams};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates, one buffer per trainable tensor in the
/// canonical order.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        let mut m = Vec::new();
        params.for_each_trainable(|t| m.push(vec![T::ZERO; t.len()]));
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam step over every trainable tensor. Rejects non-finite gradients
/// and state/gradient shape drift.
pub fn adam_update<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if grads.tensors.len() != state.m.len() {
        return Err(Error::shape(
            "adam gradients",
            format!("{} tensors", state.m.len()),
            format!("{} tensors", grads.tensors.len()),
        ));
    }
    for (i, g) in grads.tensors.iter().enumerate() {
        if g.len() != state.m[i].len() {
            return Err(Error::shape(
                format!("adam gradient tensor {i}"),
                format!("{} elements", state.m[i].len()),
                format!("{} elements", g.len()),
            ));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient tensor {i}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let beta1 = T::from_f64(config.beta1);
    let beta2 = T::from_f64(config.beta2);
    let eps = T::from_f64(config.epsilon);
    let lr = T::from_f64(config.learning_rate);
    let bias1 = T::ONE - beta1.powi(t);
    let bias2 = T::ONE - beta2.powi(t);

    let mut idx = 0;
    params.for_each_trainable_mut(|tensor| {
        let g = &grads.tensors[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for j in 0..tensor.len() {
            m[j] = beta1 * m[j] + (T::ONE - beta1) * g[j];
            v[j] = beta2 * v[j] + (T::ONE - beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            tensor[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    Ok(())
}
