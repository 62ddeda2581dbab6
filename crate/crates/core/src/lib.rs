//! Whole-word-masked MLM data, a small BERT-style encoder on a tape-based
//! reverse-mode autodiff engine, layer-mapped knowledge distillation through
//! an optional teacher assistant, and the training, fine-tuning and
//! benchmarking around them.
//!
//! Modules:
//! - [`autodiff`]: f64 tensors and the gradient tape.
//! - [`text`]: tokenizer, lexicon segmentation and whole-word masking.
//! - [`model`]: encoder configs, parameter and FLOPs accounting, checkpoints.
//! - [`distill`]: layer maps, hidden-state and prediction losses.
//! - [`trainer`]: run plans, AdamW, MLM pre-training and distillation pipelines.
//! - [`eval`]: toy-task fine-tuning, inference benchmark, pipeline comparison.
//! - [`synth`]: generated corpora with a known lexicon and a separable task.
//! - [`parallel`]: rayon helpers with a sequential fallback.

pub mod autodiff;
pub mod distill;
pub mod eval;
pub mod model;
pub mod parallel;
pub mod synth;
pub mod text;
pub mod trainer;
