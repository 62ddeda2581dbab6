//! Named parameter storage shared by models, optimizers and checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};

/// Accounting bucket of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Pooler,
    MlmHead,
    Projection,
    Classifier,
    /// Optimizer moments stored in training checkpoints.
    Optimizer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        Self::Embedding,
        Self::Encoder,
        Self::Pooler,
        Self::MlmHead,
        Self::Projection,
        Self::Classifier,
        Self::Optimizer,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&g| g == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

impl Param {
    /// Matrices and embedding tables; biases and layer-norm vectors are not
    /// weight-decayed.
    pub fn decays(&self) -> bool {
        self.tensor.shape().len() >= 2
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// σ of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Draws from N(0, σ²) restricted to ±2σ by rejection.
pub fn truncated_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            tensor: tensor.with_grad(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn normal<R: Rng>(&mut self, rng: &mut R, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let t = Tensor::new(shape, truncated_normal(rng, n, INIT_STD)).expect("valid shape");
        self.push(name, group, t)
    }

    pub fn zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.push(name, group, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.push(name, group, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Scalar count in one accounting group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records every parameter on `tape`: as trainable leaves, or as constants
    /// for a frozen model.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor.detach();
                if trainable {
                    tape.leaf(t.with_grad())
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Adds the gradients accumulated on `tape` into the stored tensors.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.take_grad();
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn into_vec(self) -> Vec<Param> {
        self.params
    }

    pub fn from_vec(params: Vec<Param>) -> Self {
        let mut set = Self::new();
        for p in params {
            set.push(p.name, p.group, p.tensor);
        }
        set
    }
}
