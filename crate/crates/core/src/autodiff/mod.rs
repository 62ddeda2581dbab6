//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! replays the record in reverse and accumulates gradients into every leaf
//! that was created with `requires_grad`. A tape is built per training step
//! and dropped afterwards.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("rows have different lengths")]
    Ragged,
    #[error("index {index} out of bounds for size {bound}")]
    Index { index: usize, bound: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{0}: NaN in input")]
    NaN(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Eager, tape-free `softmax(z / temperature)` over the trailing axis.
pub fn scaled_softmax(z: &Tensor, temperature: f64) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let p = tape.scaled_softmax(v, temperature)?;
    Ok(tape.value(p).clone())
}
