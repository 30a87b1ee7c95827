//! Optimizer settings and learning-rate schedules shared by both training
//! stages.

use ndiff::AdamWConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` every `step_size` epochs.
    Step { step_size: usize, gamma: f64 },
    /// Cosine decay from `lr` to `lr · min_factor` over the run.
    Cosine { min_factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Gradients with global norm above this are rescaled; `0` disables.
    pub clip_norm: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            clip_norm: 0.0,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimConfig {
    /// Event-localizer settings at full scale: AdamW 5e-5, decay 1e-4, StepLR.
    pub fn localizer_full_scale() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 128,
            schedule: Schedule::Step {
                step_size: 20,
                gamma: 0.5,
            },
            ..Self::default()
        }
    }

    /// Captioning-stage settings at full scale: AdamW 1e-4 with cosine decay.
    pub fn captioner_full_scale() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            schedule: Schedule::Cosine { min_factor: 0.0 },
            ..Self::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Step { step_size, gamma } => self.lr * gamma.powi((epoch / step_size.max(1)) as i32),
            Schedule::Cosine { min_factor } => {
                let t = epoch as f64 / total_epochs.max(1) as f64;
                let f = min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.lr * f
            }
        }
    }
}
