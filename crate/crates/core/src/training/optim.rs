//! Adam with optional global-norm clipping, and the linear learning-rate decay.

use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::encoder::{Grads, ParamSelection, ParamStore, Scalar};
use crate::error::{Error, Result};

/// `min_lr + (base_lr - min_lr) * (1 - step / total_steps)`, no warmup.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let remaining = 1.0 - step as f64 / cfg.total_steps as f64;
    Ok(cfg.min_lr + (cfg.base_lr - cfg.min_lr) * remaining)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient (plain Adam, not decoupled).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    step: u64,
    first: Vec<ArrayD<T>>,
    second: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(IxDyn(p.value.shape()))).collect();
        AdamState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global L2 norm of trainable gradients before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// One bias-corrected Adam update of every trainable tensor. Frozen tensors
/// and their moments are left untouched whatever their gradient holds.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut AdamState<T>,
    selection: &ParamSelection,
    lr: f64,
    cfg: &AdamConfig,
    clip: Option<f64>,
) -> Result<StepStats> {
    if grads.tensors().len() != params.len() || selection.0.len() != params.len() {
        return Err(Error::Shape("gradients, selection and parameters disagree".into()));
    }
    let mut sq = 0.0f64;
    for ((p, g), &trainable) in params.iter().zip(grads.tensors()).zip(&selection.0) {
        if !trainable {
            continue;
        }
        if g.shape() != p.value.shape() {
            return Err(Error::Shape(format!("gradient for {} has wrong shape", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        sq += g.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let clip_scale = match clip {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (scale, wd) = (T::lit(clip_scale), T::lit(cfg.weight_decay));
    let (step_size, bc2_t, eps) = (T::lit(lr / bc1), T::lit(bc2), T::lit(cfg.eps));

    for (i, (p, &trainable)) in params.iter_mut().zip(&selection.0).enumerate() {
        if !trainable {
            continue;
        }
        Zip::from(&mut p.value)
            .and(&grads.tensors()[i])
            .and(&mut state.first[i])
            .and(&mut state.second[i])
            .for_each(|w, &g, m, v| {
                let g = g * scale + wd * *w;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v / bc2_t).sqrt() + eps);
            });
    }
    Ok(StepStats { grad_norm, clip_scale })
}
