//! Adam without bias correction, with warmup-then-linear-decay learning rate
//! and decoupled weight decay.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::model::SavedOptimizer;
use crate::params::{is_decayed, ParamStore};
use crate::tensor::Mat;

use super::TrainConfig;

/// Learning-rate multiplier at training progress `x` ∈ [0, 1].
pub fn warmup_linear(x: f64, warmup: f64) -> f64 {
    if x < warmup {
        x / warmup
    } else {
        ((1.0 - x) / (1.0 - warmup)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, p)| Mat::zeros(p.rows(), p.cols())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate used by the next update.
    pub fn learning_rate(&self, cfg: &TrainConfig, total_steps: u64) -> f64 {
        let x = self.step as f64 / total_steps.max(1) as f64;
        cfg.learning_rate * warmup_linear(x, cfg.warmup_fraction)
    }

    pub fn to_saved(&self, params: &ParamStore) -> SavedOptimizer {
        SavedOptimizer {
            step: self.step,
            moments: params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .map(|((n, _), (m, v))| (n.to_string(), m.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn from_saved(saved: &SavedOptimizer, params: &ParamStore) -> Result<Self> {
        if saved.moments.len() != params.len() {
            return Err(Error::Archive(format!(
                "optimizer state covers {} tensors, model has {}",
                saved.moments.len(),
                params.len()
            )));
        }
        let mut state = Self::new(params);
        state.step = saved.step;
        for (n, m, v) in &saved.moments {
            let id = params.id(n).ok_or_else(|| Error::UnknownTensor(n.clone()))?;
            state.m[id] = m.clone();
            state.v[id] = v.clone();
        }
        Ok(state)
    }
}

/// One update of every parameter. Tensors without a gradient are treated as
/// having a zero gradient (their moments still decay).
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
    total_steps: u64,
) -> Result<()> {
    for (id, g) in grads.iter() {
        let p = params.get_by_id(id);
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                name: params.name(id).to_string(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
        }
    }
    let lr = state.learning_rate(cfg, total_steps);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for id in 0..params.len() {
        let decay = if is_decayed(params.name(id)) { cfg.weight_decay } else { 0.0 };
        let grad = grads.get(id);
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let p = params.get_by_id_mut(id).data_mut();
        for i in 0..p.len() {
            let g = grad.map_or(0.0, |g| g.data()[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = m[i] / (v[i].sqrt() + cfg.epsilon) + decay * p[i];
            p[i] -= lr * update;
        }
    }
    state.step += 1;
    Ok(())
}
