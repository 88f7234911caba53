//! Minimal Adam trainer with a cosine-decayed step size.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{backward, forward_losses_impl, LossReport, TrainingWindow};
use super::BranchParams;
use crate::error::{Result, TrackError};

/// Cosine decay from `initial` to `final_value` over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    pub initial: f64,
    pub final_value: f64,
}

impl LearningRateSchedule {
    pub fn cosine(initial: f64, final_value: f64) -> Self {
        Self {
            initial,
            final_value,
        }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.initial;
        }
        let progress = step as f64 / (total - 1) as f64;
        self.final_value
            + 0.5 * (self.initial - self.final_value) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one.
    pub final_lr_ratio: f64,
    /// Windows averaged per optimizer step.
    pub grad_accumulation: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 3e-3,
            final_lr_ratio: 1e-3,
            grad_accumulation: 1,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LearningRateSchedule {
        LearningRateSchedule::cosine(self.learning_rate, self.learning_rate * self.final_lr_ratio)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: BranchParams,
    /// Mean loss report of the windows used at each step, before the update.
    pub history: Vec<LossReport>,
}

const ADAM_EPS: f64 = 1e-8;

/// Trains `params` on `batches`. Deterministic in `cfg.seed`.
pub fn train(params: &BranchParams, batches: &[TrainingWindow], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if batches.is_empty() {
        return Err(TrackError::InvalidConfig("training needs at least one window".into()));
    }
    if cfg.grad_accumulation == 0 {
        return Err(TrackError::InvalidConfig("grad_accumulation must be at least 1".into()));
    }
    params.config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params.clone();
    let mut theta = params.flatten();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let schedule = cfg.schedule();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grad = vec![0.0; theta.len()];
        let mut mean = LossReport {
            l_det: 0.0,
            l_tmc: 0.0,
            l_tac: 0.0,
            l_all: 0.0,
        };
        for _ in 0..cfg.grad_accumulation {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = &batches[order[cursor]];
            cursor += 1;
            let drop_rng = (params.config.dropout > 0.0).then_some(&mut rng);
            let pass = forward_losses_impl(&params, batch, drop_rng)?;
            let r = pass.report;
            if !r.l_all.is_finite() {
                return Err(TrackError::Diverged {
                    step,
                    loss: r.l_all,
                });
            }
            mean.l_det += r.l_det;
            mean.l_tmc += r.l_tmc;
            mean.l_tac += r.l_tac;
            mean.l_all += r.l_all;
            for (g, d) in grad.iter_mut().zip(backward(&params, &pass).flatten()) {
                *g += d;
            }
        }
        let inv = 1.0 / cfg.grad_accumulation as f64;
        mean.l_det *= inv;
        mean.l_tmc *= inv;
        mean.l_tac *= inv;
        mean.l_all *= inv;
        history.push(mean);

        let lr = schedule.at(step, cfg.steps);
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for i in 0..theta.len() {
            let g = grad[i] * inv;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
        }
        params.assign_flat(&theta);
        if !params.is_finite() {
            return Err(TrackError::Diverged {
                step,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainOutcome { params, history })
}
