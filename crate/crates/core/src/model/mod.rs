//! Configurable transformer encoder, its parameter accounting and checkpoints.

mod accounting;
mod checkpoint;
mod config;
mod encoder;
mod params;

pub use accounting::{count_parameters, estimate_flops, ParamCount};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{
    preset, preset_names, ModelConfig, PublishedRow, DEFAULT_MAX_POSITIONS, DEFAULT_TYPE_VOCAB,
    DEFAULT_VOCAB, DESK_MAX_POSITIONS, DESK_PRESETS, DESK_VOCAB, PUBLISHED,
};
pub use encoder::{Bound, EncoderModel, Encoding, ForwardOutput};
pub use params::{truncated_normal, Param, ParamGroup, ParamId, ParamSet, INIT_STD};

use crate::autodiff::TensorError;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameter count obtained by walking the instantiated tensors of a model.
pub fn count_instantiated(model: &EncoderModel) -> ParamCount {
    let p = model.params();
    let embedding = p.count(ParamGroup::Embedding) as u64;
    let non_embedding = (p.count(ParamGroup::Encoder) + p.count(ParamGroup::Pooler)) as u64;
    ParamCount {
        total: embedding + non_embedding,
        non_embedding,
        embedding,
    }
}
