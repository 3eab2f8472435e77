use super::Param;
use crate::error::{Error, Result};

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Adam with bias correction. `beta2` and `eps` default to 0.999 and 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<(String, Param)>,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: Vec<(String, Param)>, lr: f64, beta1: f64) -> Self {
        let states = params.iter().map(|(_, p)| AdamState::zeros(p.borrow().numel())).collect();
        Adam {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            params,
            states,
        }
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|(_, p)| p.zero_grad());
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Applies one update to every parameter holding a gradient. If any
    /// gradient is non-finite, nothing is modified and the offending tensor
    /// is named in the error.
    pub fn step(&mut self) -> Result<()> {
        for (name, p) in &self.params {
            if let Some(g) = p.borrow().grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of `{name}`"),
                    });
                }
            }
        }
        for ((_, p), state) in self.params.iter().zip(&mut self.states) {
            let mut t = p.borrow_mut();
            let Some(g) = t.grad().map(|g| g.to_vec()) else { continue };
            adam_update(t.data_mut(), &g, state, self.lr, self.beta1, self.beta2, self.eps);
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
