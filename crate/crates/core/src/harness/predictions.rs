//! Versioned prediction file written by `infer` and read by `eval`.
//!
//! ```json
//! {"version": 1, "videos": [{"video_id": "v0000",
//!   "events": [{"start": 0.1, "end": 0.3, "caption": ["man", ...],
//!               "score": 1.02, "s_cs": 0.95, "s_as": 0.35}]}]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::check_version;
use crate::error::Result;

pub const PREDICTIONS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub start: f64,
    pub end: f64,
    pub caption: Vec<String>,
    pub score: f64,
    pub s_cs: f64,
    pub s_as: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPredictions {
    pub video_id: String,
    pub events: Vec<PredictedEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub version: u32,
    pub videos: Vec<VideoPredictions>,
}

impl Predictions {
    pub fn new(videos: Vec<VideoPredictions>) -> Self {
        Self {
            version: PREDICTIONS_VERSION,
            videos,
        }
    }

    /// Ground truth as predictions, with unit scores.
    pub fn from_ground_truth(dataset: &super::Dataset) -> Self {
        Self::new(
            dataset
                .videos
                .iter()
                .map(|v| VideoPredictions {
                    video_id: v.id.clone(),
                    events: v
                        .events
                        .iter()
                        .map(|e| PredictedEvent {
                            start: e.span.start(),
                            end: e.span.end(),
                            caption: dataset.vocab.decode(&e.caption),
                            score: 1.0,
                            s_cs: 1.0,
                            s_as: 0.0,
                        })
                        .collect(),
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        check_version(text, "predictions", PREDICTIONS_VERSION)?;
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
