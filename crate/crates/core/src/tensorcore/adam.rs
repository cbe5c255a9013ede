use super::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter in set order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
    pub(crate) step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.m.iter().zip(&self.v).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub(crate) fn from_parts(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Self {
        Self { m, v, step }
    }

    fn check(&self, params: &ParameterSet) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::dim("adam_step", params.len(), self.m.len()));
        }
        for ((_, name, t), m) in params.iter().zip(&self.m) {
            if m.len() != t.numel() {
                return Err(Error::dim("adam_step", format!("moment for `{name}` of {}", t.numel()), m.len()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update; zeroes the gradients afterwards.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    state.check(params)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((_, _, p), (m, v)) in params.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let grad = p.grad().to_vec();
        for (i, value) in p.values_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *value -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if p.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        p.zero_grad();
    }
    Ok(())
}
