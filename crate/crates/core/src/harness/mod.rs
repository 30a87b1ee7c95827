//! Synthetic data, file schemas and pipeline configuration.

pub mod config;
pub mod dataset;
pub mod generate;
pub mod pipeline;
pub mod predictions;

pub use config::{PipelineConfig, StageAConfig};
pub use dataset::{Dataset, Event, TokenId, VideoSample, Vocab, DATASET_VERSION};
pub use generate::{generate_dataset, GenConfig, World, TEMPLATES};
pub use predictions::{PredictedEvent, Predictions, VideoPredictions, PREDICTIONS_VERSION};
