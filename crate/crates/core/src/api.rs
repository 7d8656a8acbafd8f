//! Request and response bodies of the HTTP service.
//!
//! Paths in requests refer to the server's file system.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::gradcheck::GradCheckReport;
use crate::metrics::{EvalConfig, ScoreReport};
use crate::pipeline::{AugmentConfig, FoldReport, StepRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// Error body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: TrainConfig,
    /// Dataset manifest.
    pub data: PathBuf,
    /// Checkpoint to write.
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh network. Its stored
    /// config wins over `config`.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCreated {
    pub job: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        self != JobState::Running
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub final_loss: Option<f64>,
    /// Held-out scores, one per fold, when more than one fold is configured.
    pub folds: Vec<FoldReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job: u64,
    pub state: JobState,
    /// What the job is doing now, e.g. `fold 2/3` or `final`.
    pub phase: String,
    pub total_steps: u64,
    /// Steps of the final fit recorded so far.
    pub steps_done: u64,
    /// Step records of the final fit from the requested offset on.
    pub records: Vec<StepRecord>,
    pub outcome: Option<TrainOutcome>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub ckpt: PathBuf,
    /// A single image, or a dataset manifest (`.toml`).
    pub input: PathBuf,
    /// Directory receiving one 16-bit PNG per input, named after its stem.
    pub out: PathBuf,
    #[serde(default = "default_true")]
    pub tta: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedFile {
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub files: Vec<PredictedFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    /// Directory of probability maps named after the truth images' stems.
    pub pred: PathBuf,
    /// Manifest whose labels are the ground truth.
    pub truth: PathBuf,
    #[serde(default)]
    pub config: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub report: ScoreReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub images: Vec<ImageScore>,
    pub mean: ScoreReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRequest {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Padding is ignored; samples are written at their original size.
    #[serde(default)]
    pub augmentation: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentResponse {
    pub manifest: PathBuf,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRequest {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    20
}

impl Default for GradcheckRequest {
    fn default() -> Self {
        GradcheckRequest {
            trials: default_trials(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResponse {
    pub reports: Vec<GradCheckReport>,
    pub passed: bool,
    pub seconds: f64,
}
