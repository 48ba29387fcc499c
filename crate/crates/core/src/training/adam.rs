//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tensor};

/// Added to `sqrt(v̂)` in the update denominator.
pub const ADAM_EPS: f64 = 1e-8;

/// Step sizes and decay rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: ADAM_EPS,
        }
    }
}

/// First and second moments per parameter, plus the last step index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn zeros_like(params: &BTreeMap<String, Tensor>) -> Self {
        let z: BTreeMap<_, _> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
            .collect();
        AdamState {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One update at step `t`, which must exceed the state's last step.
/// Parameters without a gradient are left alone but still need moments.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 || t <= state.t {
        return Err(Error::invalid(format!("step {t} does not follow step {}", state.t)));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        let (m, v) = (state.m.get(name), state.v.get(name));
        if p.shape() != g.shape()
            || m.is_none_or(|m| m.shape() != p.shape())
            || v.is_none_or(|v| v.shape() != p.shape())
        {
            return Err(Error::invalid(format!("shape mismatch in Adam update of `{name}`")));
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked").data_mut();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *pi -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    state.t = t;
    Ok(())
}
