//! Adam optimizer with bias correction.

use crate::error::{Error, Result};

/// First/second moment accumulators for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Defaults: beta1=0.9, beta2=0.999, epsilon=1e-8.
    pub fn new(len: usize) -> Self {
        Self::with_betas(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One Adam update in place. `name` identifies the parameter buffer in
/// diagnostics when a non-finite gradient shows up.
pub fn adam_step(
    name: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "adam_step '{name}': params {} / grads {} / state {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in '{name}' at element {idx}: {}",
            grads[idx]
        )));
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    for i in 0..params.len() {
        let g = grads[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] =
            state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bias1;
        let v_hat = state.second_moment[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
