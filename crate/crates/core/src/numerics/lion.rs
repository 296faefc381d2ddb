//! Lion: sign of an interpolated momentum, with decoupled weight decay.
//!
//! ```text
//! u = sign(beta1 * m + (1 - beta1) * g)
//! p = p - lr * (u + weight_decay * p)
//! m = beta2 * m + (1 - beta2) * g
//! ```

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LionConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub learning_rate: f32,
    pub weight_decay: f32,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
        }
    }
}

impl LionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid(format!(
                "lion betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("lion learning rate and weight decay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LionState {
    pub config: LionConfig,
    momentum: Vec<(ParamId, Tensor)>,
}

impl LionState {
    /// Momentum buffers for `ids`, all starting at zero.
    pub fn new(config: LionConfig, store: &ParamStore, ids: &[ParamId]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            momentum: ids
                .iter()
                .map(|&id| (id, Tensor::zeros(store.get(id).value.shape())))
                .collect(),
        })
    }

    pub fn momentum(&self, id: ParamId) -> Option<&Tensor> {
        self.momentum.iter().find(|(i, _)| *i == id).map(|(_, m)| m)
    }

    pub fn momentum_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.momentum.iter_mut().find(|(i, _)| *i == id).map(|(_, m)| m)
    }

    /// Apply one update to every tracked parameter using its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let LionConfig {
            beta1,
            beta2,
            learning_rate: lr,
            weight_decay: wd,
        } = self.config;
        for (id, m) in &mut self.momentum {
            let p = store.get_mut(*id);
            p.gradient.check_same_shape(&p.value, &p.name)?;
            m.check_same_shape(&p.value, &p.name)?;
            let (value, grad) = (p.value.data_mut(), p.gradient.data());
            for ((w, &g), mv) in value.iter_mut().zip(grad).zip(m.data_mut()) {
                let u = beta1 * *mv + (1.0 - beta1) * g;
                let sign = if u > 0.0 {
                    1.0
                } else if u < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *w -= lr * (sign + wd * *w);
                *mv = beta2 * *mv + (1.0 - beta2) * g;
            }
        }
        Ok(())
    }
}

/// Single Lion update on bare tensors; see [`LionState::step`].
pub fn lion_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    momentum: &mut [Tensor],
    config: &LionConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != momentum.len() {
        return Err(Error::shape("lion_step: params, grads and momenta differ in count"));
    }
    let mut store = ParamStore::new();
    let mut ids = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.check_same_shape(g, "lion_step gradient")?;
        let id = store.add(format!("p{i}"), p.clone())?;
        store.get_mut(id).gradient = g.clone();
        ids.push(id);
    }
    let mut state = LionState::new(*config, &store, &ids)?;
    for (&id, m) in ids.iter().zip(momentum.iter()) {
        let slot = state.momentum_mut(id).expect("tracked");
        m.check_same_shape(slot, "lion_step momentum")?;
        *slot = m.clone();
    }
    state.step(&mut store)?;
    for ((&id, p), m) in ids.iter().zip(params.iter_mut()).zip(momentum.iter_mut()) {
        *p = store.get(id).value.clone();
        *m = state.momentum(id).expect("tracked").clone();
    }
    Ok(())
}
