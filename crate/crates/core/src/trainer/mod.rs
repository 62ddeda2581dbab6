//! Optimisation loop, run plans and the teacher → (assistant →) student
//! distillation pipelines.

mod data;
mod metrics;
mod optim;
mod plan;
mod run;

use std::path::Path;

pub use data::{DataStream, Dataset};
pub use metrics::{window_means, LogKind, MetricsLog, StepRecord};
pub use optim::{adamw_step, clip_global_norm, AdamW, OptimizerState, Schedule};
pub use plan::{Mode, TrainPlan};
pub use run::{
    distill_stage, heldout_accuracy, one_stage_pipeline, role_seed, train_mlm, two_stage_pipeline, HeldoutScore,
    MlmOutcome, OneStageOutcome, PipelineReport, Role, StageIo, StageOutcome, StageReport, StageSpec, TrainState,
    TwoStageOutcome,
};

use crate::autodiff::TensorError;
use crate::distill::DistillError;
use crate::model::ModelError;
use crate::text::TextError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("plan: {0}")]
    Plan(String),
    #[error("data: {0}")]
    Data(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("resume: {0}")]
    Resume(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<TrainError>,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io { path: path.display().to_string(), message: e.to_string() }
    }
}
