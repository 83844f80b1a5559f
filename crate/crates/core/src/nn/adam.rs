//! Adam optimizer.

use super::network::{NetworkConfig, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn from_config(config: &NetworkConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self::from_config(&NetworkConfig::default())
    }
}

/// First and second moments for every parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, hyper: &AdamHyper) -> Result<()> {
        if !params.same_shapes(grads) || !params.same_shapes(&self.m) || !params.same_shapes(&self.v) {
            return Err(Error::ShapeMismatch(
                "parameters, gradients and optimizer state disagree in shape".into(),
            ));
        }
        self.t += 1;
        let ((p, g), (m, v)) = (
            (params.tensors_mut(), grads.tensors()),
            (self.m.tensors_mut(), self.v.tensors_mut()),
        );
        for i in 0..p.len() {
            adam_update(
                p[i].data_mut(),
                g[i].data(),
                m[i].data_mut(),
                v[i].data_mut(),
                self.t,
                hyper,
            );
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter slice at step `t` (1-based).
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: &AdamHyper) {
    let c1 = 1.0 - h.beta1.powf(t as f64);
    let c2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
    }
}
