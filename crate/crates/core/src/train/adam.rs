use super::{AdamConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// First and second moments per parameter, indexed like the store.
/// Buffers (BN running statistics) get empty slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.kind.trainable() { vec![0.0; p.tensor.numel()] } else { Vec::new() })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored on each
/// parameter. Weights get `weight_decay · w` added to their gradient first.
/// Parameters without a gradient are left untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, config: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state covers {} parameters, the store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        if let Some(g) = p.tensor.grad() {
            if p.kind.trainable() && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter '{}'", p.name),
                });
            }
            if p.kind.trainable() && state.m[id.index()].len() != g.len() {
                return Err(Error::InvalidArgument(format!("optimizer state for '{}' has the wrong size", p.name)));
            }
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = config.adam.clone();
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let param = store.param_mut(id);
        if !param.kind.trainable() {
            continue;
        }
        let decay = if param.kind.decays() { config.weight_decay } else { 0.0 };
        let Some(grad) = param.tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let w = param.tensor.data_mut();
        for i in 0..w.len() {
            let g = grad[i] + decay * w[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
