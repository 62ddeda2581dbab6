//! Sentence classification on the pooled `[CLS]` representation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, TaskSplit};
use crate::autodiff::{Tape, Tensor};
use crate::model::{Bound, EncoderModel, ParamGroup, ParamSet};
use crate::text::{build_batch, derive_seed, Batch, Encoded, Lexicon, MaskedSample, Vocab, IGNORE_LABEL};
use crate::trainer::{adamw_step, clip_global_norm, AdamW, OptimizerState, Schedule, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { epochs: 5, lr: 1e-3, batch_size: 16, max_len: 32, seed: 0, warmup_fraction: 0.1, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

/// Encoder plus a linear head over the pooler output.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub encoder: EncoderModel,
    /// `[hidden, classes]` weight and `[classes]` bias.
    pub head: ParamSet,
}

impl Classifier {
    /// Zero weights and log-prior biases, so the untrained head predicts the
    /// majority class.
    pub fn new(encoder: EncoderModel, priors: &[f64]) -> Self {
        let h = encoder.config().hidden;
        let mut head = ParamSet::new();
        head.zeros("classifier.weight", ParamGroup::Classifier, &[h, priors.len()]);
        let bias = priors.iter().map(|p| p.max(1e-12).ln()).collect();
        head.push("classifier.bias", ParamGroup::Classifier, Tensor::new(&[priors.len()], bias).expect("bias shape"));
        Self { encoder, head }
    }

    pub fn classes(&self) -> usize {
        self.head.iter().nth(1).map_or(0, |b| b.tensor.numel())
    }

    fn logits(&self, tape: &mut Tape, enc_bound: &Bound, head: &[crate::autodiff::Var], batch: &Batch) -> Result<crate::autodiff::Var, EvalError> {
        let enc = self.encoder.encode(tape, enc_bound, &batch.ids, &batch.lengths, batch.max_len)?;
        let pooled = self.encoder.pooled(tape, enc_bound, &enc)?;
        let y = tape.matmul(pooled, head[0])?;
        Ok(tape.add_bias(y, head[1])?)
    }

    /// Predicted class per batch row.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>, EvalError> {
        let mut tape = Tape::new();
        let bound = self.encoder.bind(&mut tape, false);
        let head = self.head.bind(&mut tape, false);
        let logits = self.logits(&mut tape, &bound, &head, batch)?;
        let c = self.classes();
        Ok(tape.value(logits).data().chunks(c).map(argmax).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0
}

fn encode_batch(texts: &[&str], vocab: &Vocab, lexicon: &Lexicon, max_len: usize) -> Result<Batch, EvalError> {
    let samples: Vec<MaskedSample> = texts
        .iter()
        .map(|t| {
            let ids = Encoded::new(t, vocab, lexicon).ids;
            MaskedSample { labels: vec![IGNORE_LABEL; ids.len()], attention_len: ids.len(), input_ids: ids, selections: Vec::new() }
        })
        .collect();
    Ok(build_batch(&samples, vocab, max_len)?)
}

fn accuracy(clf: &Classifier, data: &[(usize, String)], vocab: &Vocab, lexicon: &Lexicon, cfg: &FineTuneConfig) -> Result<f64, EvalError> {
    let mut correct = 0;
    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let texts: Vec<&str> = chunk.iter().map(|(_, t)| t.as_str()).collect();
        let pred = clf.predict(&encode_batch(&texts, vocab, lexicon, cfg.max_len)?)?;
        correct += pred.iter().zip(chunk).filter(|(p, (l, _))| **p == *l).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub dev_accuracy: f64,
    pub majority_baseline: f64,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub classifier: Classifier,
}

/// Fine-tunes every encoder parameter and the head with AdamW and
/// cross-entropy; the training order is reshuffled each epoch from `cfg.seed`.
pub fn fine_tune_classifier(
    model: &EncoderModel,
    vocab: &Vocab,
    lexicon: &Lexicon,
    split: &TaskSplit,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome, EvalError> {
    if vocab.len() > model.config().vocab_size {
        return Err(EvalError::VocabMismatch { tokenizer: vocab.len(), model: model.config().vocab_size });
    }
    if split.train.is_empty() || split.dev.is_empty() {
        return Err(EvalError::Data("train and dev splits must be non-empty".into()));
    }
    for &(label, _) in split.train.iter().chain(&split.dev) {
        if label >= split.classes {
            return Err(EvalError::Label { label, classes: split.classes });
        }
    }
    let mut counts = vec![0.0; split.classes];
    split.train.iter().for_each(|(l, _)| counts[*l] += 1.0);
    let priors: Vec<f64> = counts.iter().map(|c| c / split.train.len() as f64).collect();
    let mut clf = Classifier::new(model.clone(), &priors);

    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = split.train.len().div_ceil(bs) as u64;
    let schedule = Schedule { peak: cfg.lr, warmup_fraction: cfg.warmup_fraction, total_steps: steps_per_epoch * cfg.epochs as u64 };
    let hp = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    let n_enc = clf.encoder.params().len();
    let decay: Vec<bool> = clf.encoder.params().iter().chain(clf.head.iter()).map(|p| p.decays()).collect();
    let mut opt = OptimizerState::new(clf.encoder.params().iter().chain(clf.head.iter()).map(|p| p.tensor.numel()));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX)));
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let texts: Vec<&str> = chunk.iter().map(|&i| split.train[i].1.as_str()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| split.train[i].0).collect();
            let batch = encode_batch(&texts, vocab, lexicon, cfg.max_len)?;
            let mut tape = Tape::new();
            let enc_vars = clf.encoder.bind(&mut tape, true);
            let head_vars = clf.head.bind(&mut tape, true);
            let logits = clf.logits(&mut tape, &enc_vars, &head_vars, &batch)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step }.into());
            }
            tape.backward(loss)?;
            let mut grads: Vec<Option<Vec<f64>>> =
                enc_vars.vars.iter().chain(&head_vars).map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
            drop(tape);
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            let (enc_params, head_params) = (clf.encoder.params_mut(), &mut clf.head);
            let mut tensors: Vec<&mut Tensor> =
                enc_params.iter_mut().chain(head_params.iter_mut()).map(|p| &mut p.tensor).collect();
            debug_assert_eq!(tensors.len(), n_enc + 2);
            adamw_step(&mut tensors, &grads, &decay, &mut opt, &hp, schedule.lr(step), step)?;
            total += value * chunk.len() as f64;
            step += 1;
        }
        epoch_losses.push(total / split.train.len() as f64);
    }
    Ok(FineTuneOutcome {
        dev_accuracy: accuracy(&clf, &split.dev, vocab, lexicon, cfg)?,
        majority_baseline: split.majority_baseline(),
        epoch_losses,
        classifier: clf,
    })
}

/// Dev accuracy over several fine-tuning seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub spread: f64,
}

impl SeedSummary {
    pub fn new(seeds: Vec<u64>, accuracies: Vec<f64>) -> Self {
        let (mean, spread) = mean_spread(&accuracies);
        Self { seeds, accuracies, mean, spread }
    }
}

pub(crate) fn mean_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let spread = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, spread)
}

/// Runs [`fine_tune_classifier`] once per seed, overriding `cfg.seed`.
pub fn fine_tune_seeds(
    model: &EncoderModel,
    vocab: &Vocab,
    lexicon: &Lexicon,
    split: &TaskSplit,
    cfg: &FineTuneConfig,
    seeds: &[u64],
) -> Result<SeedSummary, EvalError> {
    let accuracies = seeds
        .iter()
        .map(|&seed| fine_tune_classifier(model, vocab, lexicon, split, &FineTuneConfig { seed, ..*cfg }).map(|o| o.dev_accuracy))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SeedSummary::new(seeds.to_vec(), accuracies))
}
