//! Pipeline configuration, read from JSON. Missing fields take defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::GenConfig;
use crate::captioner::{CaptionerConfig, StageBConfig};
use crate::ecs::EcsConfig;
use crate::error::{Error, Result};
use crate::localizer::LocalizerConfig;
use crate::optim::{OptimConfig, Schedule};
use crate::setpred::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageAConfig {
    pub optim: OptimConfig,
    pub epochs: usize,
    pub weights: LossWeights,
}

impl Default for StageAConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                lr: 2e-3,
                batch_size: 8,
                schedule: Schedule::Cosine { min_factor: 0.05 },
                ..OptimConfig::default()
            },
            epochs: 150,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gen: GenConfig,
    pub localizer: LocalizerConfig,
    pub stage_a: StageAConfig,
    pub captioner: CaptionerConfig,
    pub stage_b: StageBConfig,
    pub ecs: EcsConfig,
    /// Events kept by the `first-k` and `random` decoders.
    pub baseline_k: usize,
    /// Seed of every training and decoding draw.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            localizer: LocalizerConfig::default(),
            stage_a: StageAConfig::default(),
            captioner: CaptionerConfig::default(),
            stage_b: StageBConfig::default(),
            ecs: EcsConfig::default(),
            baseline_k: 4,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the generator seed and the training/decoding seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = seed;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.ecs.validate()?;
        if self.baseline_k == 0 {
            return Err(Error::Config("baseline_k must be positive".into()));
        }
        if self.gen.max_events >= self.localizer.num_queries {
            return Err(Error::Config(format!(
                "max_events {} must be below num_queries {}",
                self.gen.max_events, self.localizer.num_queries
            )));
        }
        if self.gen.feature_dim != self.localizer.feature_dim {
            return Err(Error::Config(format!(
                "gen.feature_dim {} differs from localizer.feature_dim {}",
                self.gen.feature_dim, self.localizer.feature_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_takes_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 7, "ecs": {"alpha": 1.0}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ecs.alpha, 1.0);
        assert_eq!(cfg.ecs.batch_threshold, EcsConfig::default().batch_threshold);
        assert_eq!(cfg.gen, GenConfig::default());
    }

    #[test]
    fn round_trips() {
        let cfg = PipelineConfig::default().with_seed(3);
        assert_eq!(PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn default_is_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_zero_baseline_k() {
        assert!(PipelineConfig::from_json(r#"{"baseline_k": 0}"#).is_err());
    }
}
