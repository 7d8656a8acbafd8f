//! End-to-end workflows: datasets, training, checkpoints, prediction.

pub mod checkpoint;
pub mod config;
pub mod imageio;
pub mod manifest;
mod predict;
pub mod synthetic;
mod train;
pub mod workflow;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress};
pub use config::{AugmentConfig, PredictConfig, TrainConfig, TrainingConfig};
pub use manifest::{load_dataset, DatasetManifest, ManifestEntry};
pub use predict::{predict, predict_image};
pub use train::{
    augment_sample, cross_validate, fold_assignment, train, train_to_file, FoldReport, StepRecord, Trainer,
};
