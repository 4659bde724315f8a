//! Experiment configuration, the three-stage training protocol,
//! checkpoints, inference and evaluation.

pub mod checkpoint;
pub mod config;
pub mod features;
pub mod infer;
pub mod model;
pub mod plugins;
pub mod train;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest};
pub use config::{DetectorConfig, ExperimentConfig, PluginConfig, SplitConfig, StageConfig};
pub use features::{extract_features, sample_features, FeatureCache};
pub use infer::{evaluate, predict, regional_risk_attention, run_inference, write_evaluation, Evaluation, InferenceOutput, Predictions};
pub use model::{Model, StageFlags};
pub use train::{stage1, stage2, stage3, start, train_all, PreparedData, StageReport};
