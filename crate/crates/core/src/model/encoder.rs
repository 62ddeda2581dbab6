//! Post-layer-norm BERT-style encoder with a tied MLM head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamGroup, ParamId, ParamSet};
use super::{ModelConfig, ModelError};
use crate::autodiff::{Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
struct EmbeddingIds {
    token: ParamId,
    position: ParamId,
    token_type: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    output: (ParamId, ParamId),
    attn_ln: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
    ffn_ln: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
struct MlmIds {
    dense: (ParamId, ParamId),
    ln: (ParamId, ParamId),
    output_bias: ParamId,
}

/// Encoder plus pooler and MLM head. The MLM decoder reuses the token
/// embedding table (no separate storage).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamSet,
    embeddings: EmbeddingIds,
    layers: Vec<LayerIds>,
    pooler: (ParamId, ParamId),
    mlm: MlmIds,
}

/// Parameters of one model recorded on a tape, indexed like its [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Encoder output on a tape. Every hidden state is a `[batch·seq, hidden]`
/// matrix; index 0 is the embedding output.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub hidden_states: Vec<Var>,
    /// Attention probabilities per layer, `[batch, heads, seq, seq]`.
    pub attention: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

impl Encoding {
    pub fn last(&self) -> Var {
        *self.hidden_states.last().expect("at least the embedding output")
    }
}

/// Tape-free forward result.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `layers + 1` tensors of shape `[batch, seq, hidden]`.
    pub hidden_states: Vec<Tensor>,
    /// `[batch, seq, vocab]`.
    pub logits: Tensor,
}

impl EncoderModel {
    /// Fresh model: truncated-normal(σ = 0.02) matrices and tables, zero
    /// biases, unit layer-norm gains. Deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (h, f) = (config.hidden, config.ffn);
        use ParamGroup::*;

        let embeddings = EmbeddingIds {
            token: p.normal(&mut rng, "embeddings.token", Embedding, &[config.vocab_size, h]),
            position: p.normal(&mut rng, "embeddings.position", Embedding, &[config.max_positions, h]),
            token_type: p.normal(&mut rng, "embeddings.token_type", Embedding, &[config.type_vocab, h]),
            ln_gain: p.ones("embeddings.ln.gain", Embedding, &[h]),
            ln_bias: p.zeros("embeddings.ln.bias", Embedding, &[h]),
        };

        let dense = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: String, group, rows, cols| {
            let w = p.normal(rng, &format!("{name}.weight"), group, &[rows, cols]);
            let b = p.zeros(&format!("{name}.bias"), group, &[cols]);
            (w, b)
        };
        let norm = |p: &mut ParamSet, name: String, group| {
            (
                p.ones(&format!("{name}.gain"), group, &[h]),
                p.zeros(&format!("{name}.bias"), group, &[h]),
            )
        };

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("layer.{l}.{s}");
            layers.push(LayerIds {
                query: dense(&mut p, &mut rng, n("attention.query"), Encoder, h, h),
                key: dense(&mut p, &mut rng, n("attention.key"), Encoder, h, h),
                value: dense(&mut p, &mut rng, n("attention.value"), Encoder, h, h),
                output: dense(&mut p, &mut rng, n("attention.output"), Encoder, h, h),
                attn_ln: norm(&mut p, n("attention.ln"), Encoder),
                ffn_in: dense(&mut p, &mut rng, n("ffn.in"), Encoder, h, f),
                ffn_out: dense(&mut p, &mut rng, n("ffn.out"), Encoder, f, h),
                ffn_ln: norm(&mut p, n("ffn.ln"), Encoder),
            });
        }
        let pooler = dense(&mut p, &mut rng, "pooler".into(), Pooler, h, h);
        let mlm = MlmIds {
            dense: dense(&mut p, &mut rng, "mlm.transform".into(), MlmHead, h, h),
            ln: norm(&mut p, "mlm.ln".into(), MlmHead),
            output_bias: p.zeros("mlm.output_bias", MlmHead, &[config.vocab_size]),
        };
        Ok(Self { config, params: p, embeddings, layers, pooler, mlm })
    }

    /// Rebuilds a model around stored parameters, checking every tensor's
    /// name and shape against a fresh layout for `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        let mut model = Self::init(config, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() || want.group != got.group {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound { vars: self.params.bind(tape, trainable) }
    }

    /// Checks ids, lengths and shape before a forward pass.
    pub fn check_inputs(&self, ids: &[usize], lengths: &[usize], seq: usize) -> Result<(), ModelError> {
        let batch = lengths.len();
        if batch == 0 || seq == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        if ids.len() != batch * seq {
            return Err(ModelError::Input(format!(
                "{} ids do not form a {batch}×{seq} batch",
                ids.len()
            )));
        }
        if seq > self.config.max_positions {
            return Err(ModelError::Input(format!(
                "sequence length {seq} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(ModelError::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > seq) {
            return Err(ModelError::Input(format!("length {bad} outside 1..={seq}")));
        }
        Ok(())
    }

    /// Runs the encoder on a padded `[batch, seq]` id matrix. Keys past
    /// `lengths[b]` are hidden from attention.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        lengths: &[usize],
        seq: usize,
    ) -> Result<Encoding, ModelError> {
        self.check_inputs(ids, lengths, seq)?;
        let batch = lengths.len();
        let e = &self.embeddings;
        let tok = tape.embedding(bound.var(e.token), ids)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.embedding(bound.var(e.position), &positions)?;
        let typ = tape.embedding(bound.var(e.token_type), &vec![0; ids.len()])?;
        let sum = tape.add(tok, pos)?;
        let sum = tape.add(sum, typ)?;
        let mut x = tape.layer_norm(sum, bound.var(e.ln_gain), bound.var(e.ln_bias), LAYER_NORM_EPS)?;

        let mut hidden_states = Vec::with_capacity(self.layers.len() + 1);
        let mut attention = Vec::with_capacity(self.layers.len());
        hidden_states.push(x);
        for layer in &self.layers {
            let (out, probs) = self.layer_forward(tape, bound, layer, x, lengths, batch, seq)?;
            x = out;
            hidden_states.push(x);
            attention.push(probs);
        }
        Ok(Encoding { hidden_states, attention, batch, seq })
    }

    fn linear(tape: &mut Tape, bound: &Bound, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var, ModelError> {
        let y = tape.matmul(x, bound.var(w))?;
        Ok(tape.add_bias(y, bound.var(b))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: &LayerIds,
        x: Var,
        lengths: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<(Var, Var), ModelError> {
        let (h, heads, dh) = (self.config.hidden, self.config.heads, self.config.head_dim());
        let split = |tape: &mut Tape, ids| -> Result<Var, ModelError> {
            let y = Self::linear(tape, bound, x, ids)?;
            let y = tape.reshape(y, &[batch, seq, heads, dh])?;
            Ok(tape.swap_axes_12(y)?)
        };
        let q = split(tape, layer.query)?;
        let k = split(tape, layer.key)?;
        let v = split(tape, layer.value)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.masked_softmax(scores, lengths)?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.swap_axes_12(ctx)?;
        let ctx = tape.reshape(ctx, &[batch * seq, h])?;
        let attn = Self::linear(tape, bound, ctx, layer.output)?;
        let res = tape.add(x, attn)?;
        let x1 = tape.layer_norm(res, bound.var(layer.attn_ln.0), bound.var(layer.attn_ln.1), LAYER_NORM_EPS)?;

        let inner = Self::linear(tape, bound, x1, layer.ffn_in)?;
        let inner = tape.gelu(inner)?;
        let out = Self::linear(tape, bound, inner, layer.ffn_out)?;
        let res = tape.add(x1, out)?;
        let y = tape.layer_norm(res, bound.var(layer.ffn_ln.0), bound.var(layer.ffn_ln.1), LAYER_NORM_EPS)?;
        Ok((y, probs))
    }

    /// MLM logits for the given rows of a `[n, hidden]` state (all rows when `None`).
    pub fn mlm_logits(&self, tape: &mut Tape, bound: &Bound, hidden: Var, rows: Option<&[usize]>) -> Result<Var, ModelError> {
        let x = match rows {
            Some(r) => tape.index_rows(hidden, r)?,
            None => hidden,
        };
        let t = Self::linear(tape, bound, x, self.mlm.dense)?;
        let t = tape.gelu(t)?;
        let t = tape.layer_norm(t, bound.var(self.mlm.ln.0), bound.var(self.mlm.ln.1), LAYER_NORM_EPS)?;
        let logits = tape.matmul_nt(t, bound.var(self.embeddings.token))?;
        Ok(tape.add_bias(logits, bound.var(self.mlm.output_bias))?)
    }

    /// `tanh(W·h[CLS] + b)` for every sequence, `[batch, hidden]`.
    pub fn pooled(&self, tape: &mut Tape, bound: &Bound, enc: &Encoding) -> Result<Var, ModelError> {
        let cls_rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.seq).collect();
        let cls = tape.index_rows(enc.last(), &cls_rows)?;
        let y = Self::linear(tape, bound, cls, self.pooler)?;
        Ok(tape.tanh(y)?)
    }

    /// Inference pass returning every hidden state and full MLM logits.
    pub fn forward(&self, ids: &[usize], lengths: &[usize], seq: usize) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &bound, ids, lengths, seq)?;
        let logits = self.mlm_logits(&mut tape, &bound, enc.last(), None)?;
        let (b, h, v) = (enc.batch, self.config.hidden, self.config.vocab_size);
        let hidden_states = enc
            .hidden_states
            .iter()
            .map(|&s| tape.value(s).reshaped(&[b, seq, h]))
            .collect::<Result<_, _>>()?;
        let logits = tape.value(logits).reshaped(&[b, seq, v])?;
        Ok(ForwardOutput { hidden_states, logits })
    }
}
