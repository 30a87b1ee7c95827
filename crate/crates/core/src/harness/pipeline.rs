//! The five pipeline stages as library functions, shared by the `tap` binary
//! and the tests.

use std::path::Path;

use ndiff::{read_checkpoint, write_checkpoint, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::dataset::{check_version, Dataset};
use super::predictions::{PredictedEvent, Predictions, VideoPredictions};
use crate::captioner::{train_stage_b, Captioner, StageBEpoch};
use crate::ecs::{ecs_decode, first_k_decode, random_decode, DecodedEvent, Model, ReferenceScorer};
use crate::error::{Error, Result};
use crate::localizer::{train_localizer, EpochLoss, Localizer};

pub const TRACE_VERSION: u32 = 1;

/// Per-epoch training losses of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace<T> {
    pub version: u32,
    pub stage: String,
    pub epochs: Vec<T>,
}

impl<T: Serialize + DeserializeOwned> Trace<T> {
    pub fn new(stage: &str, epochs: Vec<T>) -> Self {
        Self {
            version: TRACE_VERSION,
            stage: stage.to_string(),
            epochs,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        check_version(&text, "trace", TRACE_VERSION)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub type LocalizerTrace = Trace<EpochLoss>;
pub type CaptionerTrace = Trace<StageBEpoch>;

/// Decoding strategy for `infer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    Ecs,
    Random,
    FirstK,
}

impl std::str::FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ecs" => Ok(Self::Ecs),
            "random" => Ok(Self::Random),
            "first-k" => Ok(Self::FirstK),
            other => Err(Error::Config(format!("unknown decoder `{other}`"))),
        }
    }
}

/// Stage A. Returns the localizer weights and the loss trace.
pub fn run_train_localizer(dataset: &Dataset, cfg: &PipelineConfig) -> Result<(ParamStore, LocalizerTrace)> {
    let a = &cfg.stage_a;
    let trained = train_localizer(dataset, cfg.localizer, a.weights, &a.optim, a.epochs, cfg.seed)?;
    Ok((trained.params, Trace::new("localizer", trained.trace)))
}

/// Stage B. The returned store holds the localizer, time embedding, decoder
/// and the alignment scorer fitted on `dataset`.
pub fn run_train_captioner(
    dataset: &Dataset,
    loc_checkpoint: &ParamStore,
    cfg: &PipelineConfig,
) -> Result<(ParamStore, CaptionerTrace)> {
    if loc_checkpoint.is_empty() {
        return Err(Error::MissingCheckpoint("stage-A localizer weights".into()));
    }
    let mut loc_params = ParamStore::new();
    let loc = Localizer::from_checkpoint(loc_checkpoint, &mut loc_params)?;
    let trained = train_stage_b(dataset, &loc, &loc_params, cfg.captioner, &cfg.stage_b, cfg.seed)?;
    let mut params = trained.params;
    ReferenceScorer::fit(dataset)?.save_into(&mut params);
    Ok((params, Trace::new("captioner", trained.trace)))
}

/// Everything `infer` needs, rebuilt from a stage-B checkpoint.
pub struct FullModel {
    pub localizer: Localizer,
    pub captioner: Captioner,
    pub scorer: ReferenceScorer,
    pub params: ParamStore,
}

impl FullModel {
    pub fn from_checkpoint(loaded: &ParamStore) -> Result<Self> {
        let mut params = ParamStore::new();
        let localizer = Localizer::from_checkpoint(loaded, &mut params)?;
        let captioner = Captioner::from_checkpoint(loaded, &mut params)?;
        let scorer = ReferenceScorer::load_from(loaded)?;
        Ok(Self {
            localizer,
            captioner,
            scorer,
            params,
        })
    }

    pub fn model(&self) -> Model<'_> {
        Model {
            captioner: &self.captioner,
            params: &self.params,
        }
    }
}

/// Decodes every video of `dataset`. The random decoder draws from one
/// stream seeded by `cfg.seed`, consumed in dataset order.
pub fn run_infer(dataset: &Dataset, model: &FullModel, decode: Decode, cfg: &PipelineConfig) -> Result<Predictions> {
    if dataset.feature_dim != model.localizer.config.feature_dim {
        return Err(Error::FeatureDim {
            expected: model.localizer.config.feature_dim,
            got: dataset.feature_dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDEC0DE);
    let m = model.model();
    let alpha = cfg.ecs.alpha;
    let mut videos = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let anchors = model.localizer.localize(&model.params, &v.features)?;
        let events = match decode {
            Decode::Ecs => ecs_decode(m, &v.features, &anchors, &model.scorer, &cfg.ecs)?,
            Decode::FirstK => first_k_decode(m, &v.features, &anchors, cfg.baseline_k, &model.scorer, alpha)?,
            Decode::Random => random_decode(m, &v.features, &anchors, cfg.baseline_k, &model.scorer, alpha, &mut rng)?,
        };
        videos.push(VideoPredictions {
            video_id: v.id.clone(),
            events: to_predicted(dataset, events),
        });
    }
    Ok(Predictions::new(videos))
}

fn to_predicted(dataset: &Dataset, events: Vec<DecodedEvent>) -> Vec<PredictedEvent> {
    events
        .into_iter()
        .map(|d| PredictedEvent {
            start: d.span.start(),
            end: d.span.end(),
            caption: dataset.vocab.decode(&d.caption),
            score: d.score,
            s_cs: d.s_cs,
            s_as: d.s_as,
        })
        .collect()
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    Ok(write_checkpoint(path, store)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    Ok(read_checkpoint(path)?)
}
