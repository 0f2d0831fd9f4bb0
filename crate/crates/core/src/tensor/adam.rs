use serde::{Deserialize, Serialize};

use super::{ParamSet, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params
                .iter()
                .map(|(_, _, t)| vec![0.0; t.numel()])
                .collect(),
            v: params
                .iter()
                .map(|(_, _, t)| vec![0.0; t.numel()])
                .collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`,
/// at learning rate `lr` (which overrides `cfg.lr`, for schedules).
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f32,
    checked: bool,
) -> Result<(), TensorError> {
    if checked {
        for (_, name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFiniteGrad {
                        param: name.to_string(),
                    });
                }
            }
        }
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let step = (lr as f64 / bc1) as f32;
    let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (i, (_, p)) in params.tensors_mut().enumerate() {
        let Some(g) = &p.grad else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let denom = v[j].sqrt() * inv_bc2_sqrt + cfg.eps;
            let mut update = step * m[j] / denom;
            if cfg.weight_decay != 0.0 {
                update += lr * cfg.weight_decay * p.data[j];
            }
            p.data[j] -= update;
        }
    }
    Ok(())
}
