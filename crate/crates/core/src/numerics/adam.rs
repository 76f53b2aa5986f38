//! Adam optimizer with bias correction over named parameter stores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::Gradients;
use crate::numerics::tensor::Tensor;

/// Anything that exposes named tensors the optimizer may update.
pub trait ParamStore {
    fn param_names(&self) -> Vec<String>;
    fn param(&self, name: &str) -> Option<&Tensor>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second_moment.get(name)
    }
}

/// One Adam update over `trainable`. Parameters outside `trainable` and their
/// accumulators are untouched. A trainable parameter without a gradient entry
/// is a contract error.
pub fn adam_step(
    params: &mut dyn ParamStore,
    trainable: &[String],
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<()> {
    if state.learning_rate <= 0.0 {
        return Err(Error::Contract("adam_step: learning_rate must be > 0".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);

    for name in trainable {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("adam_step: missing gradient for {name}")))?;
        let param = params
            .param_mut(name)
            .ok_or_else(|| Error::Contract(format!("adam_step: unknown parameter {name}")))?;
        if grad.shape() != param.shape() {
            return Err(Error::Shape(format!(
                "adam_step: gradient shape {:?} vs parameter {:?} for {name}",
                grad.shape(),
                param.shape()
            )));
        }
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));

        let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
        for ((p, mi), (vi, &g)) in param
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(grad.data()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !param.is_finite() {
            return Err(Error::Numeric(format!(
                "adam_step: parameter {name} left finite domain"
            )));
        }
    }
    Ok(())
}
