//! Losses, optimisation, learning-rate schedule, early stopping and a
//! finite-difference gradient checker.

mod early_stop;
mod gradcheck;
mod loss;
mod optim;

use serde::{Deserialize, Serialize};

use crate::encoder::Precision;
use crate::error::{Error, Result};

pub use early_stop::{early_stop_update, EarlyStopState, StopDecision};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use loss::{
    bce_multilabel_loss, bce_multilabel_with_grad, mlm_loss, mlm_loss_with_grad, triplet_mh_loss, triplet_mh_with_grad,
};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState, StepStats};

/// Maximum number of points kept per curve in serialized reports.
pub const MAX_CURVE_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-5,
            min_lr: 0.0,
            total_steps: 1000,
            batch_size: 16,
            epochs: 40,
            patience: 7,
            seed: 0,
            grad_clip: Some(1.0),
            weight_decay: 0.0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Masked-LM pre-training defaults: linear decay from 5e-5 to 4.95e-8.
    pub fn pretraining(total_steps: usize) -> Self {
        TrainConfig {
            base_lr: 5e-5,
            min_lr: 4.95e-8,
            total_steps,
            batch_size: 8,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    /// Number of optimizer steps taken by `epochs` passes over `examples`.
    pub fn steps_for(epochs: usize, examples: usize, batch_size: usize) -> usize {
        epochs * examples.div_ceil(batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return bad(format!("min_lr must lie in [0, base_lr], got {}", self.min_lr));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return bad("total_steps, batch_size, epochs and patience must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, training loss)` pairs.
    pub loss_curve: Vec<(usize, f64)>,
    /// `(step, dev metric)` pairs, one per evaluation.
    pub dev_curve: Vec<(usize, f64)>,
    pub final_eval_loss: f64,
    pub initial_perplexity: Option<f64>,
    pub perplexity: Option<f64>,
    pub steps: usize,
    pub best_step: usize,
    pub stopped_early: bool,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Thins both curves to at most [`MAX_CURVE_POINTS`] points, keeping the last.
    pub fn downsampled(&self) -> TrainReport {
        TrainReport {
            loss_curve: downsample(&self.loss_curve, MAX_CURVE_POINTS),
            dev_curve: downsample(&self.dev_curve, MAX_CURVE_POINTS),
            ..self.clone()
        }
    }
}

pub fn downsample<P: Clone>(points: &[P], max: usize) -> Vec<P> {
    if points.len() <= max || max < 2 {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max - 1);
    let mut out: Vec<P> = points.iter().step_by(stride).cloned().collect();
    if !(points.len() - 1).is_multiple_of(stride) {
        out.push(points[points.len() - 1].clone());
    }
    out
}
