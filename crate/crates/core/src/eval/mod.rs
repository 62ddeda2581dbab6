//! Downstream evaluation: toy classification fine-tuning, inference
//! benchmarking and the two-stage versus one-stage comparison table.

mod bench;
mod compare;
mod finetune;
mod task;

pub use bench::{
    benchmark_inference, estimate_forward_bytes, BenchOptions, BenchReport, BenchRow, Threading, BENCH_PROTOCOL,
};
pub use compare::{compare_pipelines, Cell, Comparison, ComparisonRow, PipelineRun};
pub use finetune::{fine_tune_classifier, fine_tune_seeds, Classifier, FineTuneConfig, FineTuneOutcome, SeedSummary};
pub use task::{TaskDataset, TaskSplit};

use crate::autodiff::TensorError;
use crate::model::ModelError;
use crate::text::TextError;
use crate::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("label {label} is out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("task data: {0}")]
    Data(String),
    #[error("tokenizer vocabulary of {tokenizer} exceeds model vocabulary of {model}")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error("cannot compare: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl EvalError {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io { path: path.display().to_string(), message: e.to_string() }
    }
}
