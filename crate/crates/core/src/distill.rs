//! Distillation objectives: projected hidden-state MSE, temperature-scaled
//! soft-label cross-entropy, and their weighted sum.
//!
//! Hidden-state indices follow the encoder's convention: 0 is the embedding
//! output and `i` is the output of transformer layer `i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Tensor, TensorError, Var};
use crate::model::{Bound, EncoderModel, ModelError, ParamGroup, ParamSet};
use crate::text::Batch;

pub const DEFAULT_TEMPERATURE: f64 = 8.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistillError {
    #[error("layer map: {0}")]
    LayerMap(String),
    #[error("teacher layers {teacher} not divisible by student layers {student}; supply an explicit layer map")]
    NotDivisible { student: usize, teacher: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("no positions contribute to the prediction loss")]
    EmptyBatch,
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ordered `(student, teacher)` hidden-state index pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    pub fn new(pairs: Vec<(usize, usize)>, student_layers: usize, teacher_layers: usize) -> Result<Self, DistillError> {
        if pairs.is_empty() {
            return Err(DistillError::LayerMap("empty".into()));
        }
        for w in pairs.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(DistillError::LayerMap(format!(
                    "indices must be strictly increasing: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        let (s, t) = *pairs.last().unwrap();
        if s > student_layers || t > teacher_layers {
            return Err(DistillError::LayerMap(format!(
                "pair ({s}, {t}) exceeds {student_layers} student / {teacher_layers} teacher layers"
            )));
        }
        Ok(Self { pairs })
    }

    /// Parses `"1:2,2:4"`.
    pub fn parse(text: &str, student_layers: usize, teacher_layers: usize) -> Result<Self, DistillError> {
        let pairs = text
            .split(',')
            .map(|p| {
                let (s, t) = p
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| DistillError::LayerMap(format!("expected student:teacher, got {p:?}")))?;
                let num = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|e| DistillError::LayerMap(format!("{x:?}: {e}")))
                };
                Ok((num(s)?, num(t)?))
            })
            .collect::<Result<Vec<_>, DistillError>>()?;
        Self::new(pairs, student_layers, teacher_layers)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl std::fmt::Display for LayerMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.pairs.iter().map(|(s, t)| format!("{s}:{t}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Maps student layer `i` to teacher layer `i·k` with `k = teacher / student`.
pub fn uniform_layer_map(student_layers: usize, teacher_layers: usize) -> Result<LayerMap, DistillError> {
    if student_layers == 0 || teacher_layers % student_layers != 0 {
        return Err(DistillError::NotDivisible { student: student_layers, teacher: teacher_layers });
    }
    let k = teacher_layers / student_layers;
    LayerMap::new((1..=student_layers).map(|i| (i, i * k)).collect(), student_layers, teacher_layers)
}

/// Which positions feed the prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionPositions {
    /// Only positions carrying an MLM label.
    #[default]
    Masked,
    /// Every non-pad position.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub layer_map: LayerMap,
    pub hidden_weight: f64,
    pub prediction_weight: f64,
    pub positions: PredictionPositions,
}

impl DistillConfig {
    /// Temperature 8, unit weights, masked positions only.
    pub fn new(layer_map: LayerMap) -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            layer_map,
            hidden_weight: 1.0,
            prediction_weight: 1.0,
            positions: PredictionPositions::Masked,
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        check_temperature(self.temperature)?;
        for w in [self.hidden_weight, self.prediction_weight] {
            if !w.is_finite() || w < 0.0 {
                return Err(DistillError::LayerMap(format!("loss weight {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<(), DistillError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(DistillError::Temperature(t))
    }
}

/// One `[student_hidden, teacher_hidden]` projection per mapped pair, named
/// `projection.{k}`, truncated-normal initialised.
pub fn init_projections(map: &LayerMap, student_hidden: usize, teacher_hidden: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for k in 0..map.len() {
        set.normal(
            &mut rng,
            &format!("projection.{k}"),
            ParamGroup::Projection,
            &[student_hidden, teacher_hidden],
        );
    }
    set
}

/// Σ over mapped pairs of `mean((H_s·W − H_t)²)` over the given rows and all
/// teacher dimensions.
///
/// `student` and `teacher` hold every hidden state as `[n, d′]` / `[n, d]`
/// matrices; `rows` selects the non-pad rows. Teacher states are constants.
pub fn hidden_loss(
    tape: &mut Tape,
    student: &[Var],
    teacher: &[Tensor],
    projections: &[Var],
    map: &LayerMap,
    rows: &[usize],
) -> Result<Var, DistillError> {
    if projections.len() != map.len() {
        return Err(DistillError::Shape(format!(
            "{} projections for {} mapped pairs",
            projections.len(),
            map.len()
        )));
    }
    if rows.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    for (&(s, t), &w) in map.pairs().iter().zip(projections) {
        let hs = *student
            .get(s)
            .ok_or_else(|| DistillError::Shape(format!("student has no hidden state {s}")))?;
        let ht = teacher
            .get(t)
            .ok_or_else(|| DistillError::Shape(format!("teacher has no hidden state {t}")))?;
        if ht.shape().len() != 2 || ht.shape()[0] != tape.shape(hs)[0] {
            return Err(DistillError::Shape(format!(
                "student state {:?} vs teacher state {:?}",
                tape.shape(hs),
                ht.shape()
            )));
        }
        let hs = tape.index_rows(hs, rows)?;
        let projected = tape.matmul(hs, w)?;
        let target = gather_rows(ht, rows)?;
        let target = tape.constant(target);
        let diff = tape.sub(projected, target)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(total.expect("non-empty layer map"))
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor, TensorError> {
    let d = t.last_dim();
    let n = t.shape()[0];
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= n {
            return Err(TensorError::Index { index: r, bound: n });
        }
        out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
    }
    Tensor::new(&[rows.len(), d], out)
}

/// Mean over contributing rows of `−softmax(z_T/t) · log softmax(z_S/t)`.
///
/// Both logit matrices are `[n, V]` with one row per position; `contributes`
/// marks the rows that count. The teacher side is a constant and no `t²`
/// factor is applied.
pub fn prediction_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    temperature: f64,
    contributes: &[bool],
) -> Result<Var, DistillError> {
    check_temperature(temperature)?;
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 2 || shape != teacher_logits.shape() || contributes.len() != shape[0] {
        return Err(DistillError::Shape(format!(
            "student logits {shape:?}, teacher logits {:?}, {} mask entries",
            teacher_logits.shape(),
            contributes.len()
        )));
    }
    let rows: Vec<usize> = (0..contributes.len()).filter(|&i| contributes[i]).collect();
    if rows.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let (student, teacher) = if rows.len() == shape[0] {
        (student_logits, teacher_logits.detach())
    } else {
        (tape.index_rows(student_logits, &rows)?, gather_rows(teacher_logits, &rows)?)
    };
    let target = autodiff::scaled_softmax(&teacher, temperature)?;
    Ok(tape.soft_cross_entropy(student, &target, temperature)?)
}

/// `w_h·hidden + w_p·pred` for plain numbers.
pub fn combine_losses(hidden: f64, pred: f64, hidden_weight: f64, prediction_weight: f64) -> Result<f64, DistillError> {
    if !hidden.is_finite() {
        return Err(DistillError::NonFinite("hidden"));
    }
    if !pred.is_finite() {
        return Err(DistillError::NonFinite("prediction"));
    }
    Ok(hidden_weight * hidden + prediction_weight * pred)
}

/// Weighted sum of the two objectives on a tape.
pub fn total_distill_loss(
    tape: &mut Tape,
    hidden: Var,
    pred: Var,
    hidden_weight: f64,
    prediction_weight: f64,
) -> Result<Var, DistillError> {
    combine_losses(tape.value(hidden).item(), tape.value(pred).item(), 1.0, 1.0)?;
    let h = tape.scale(hidden, hidden_weight)?;
    let p = tape.scale(pred, prediction_weight)?;
    Ok(tape.add(h, p)?)
}

/// Frozen teacher outputs for one batch.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// Every hidden state as a `[batch·seq, hidden]` matrix.
    pub hidden_states: Vec<Tensor>,
    /// Logits at the prediction rows, `[rows, vocab]`.
    pub logits: Tensor,
}

/// Flat batch positions that feed the prediction loss.
pub fn prediction_rows(batch: &Batch, positions: PredictionPositions) -> Vec<usize> {
    match positions {
        PredictionPositions::Masked => batch.labeled_positions(),
        PredictionPositions::All => batch.real_positions(),
    }
}

/// Runs the teacher on its own tape without recording gradients.
pub fn teacher_targets(teacher: &EncoderModel, batch: &Batch, rows: &[usize]) -> Result<TeacherTargets, DistillError> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    let enc = teacher.encode(&mut tape, &bound, &batch.ids, &batch.lengths, batch.max_len)?;
    let logits = teacher.mlm_logits(&mut tape, &bound, enc.last(), Some(rows))?;
    Ok(TeacherTargets {
        hidden_states: enc.hidden_states.iter().map(|&v| tape.value(v).detach()).collect(),
        logits: tape.value(logits).detach(),
    })
}

/// The three loss nodes of one distillation step.
#[derive(Debug, Clone, Copy)]
pub struct DistillLosses {
    pub layer: Var,
    pub prediction: Var,
    pub total: Var,
}

/// Student forward plus both objectives against precomputed teacher targets.
pub fn student_losses(
    tape: &mut Tape,
    student: &EncoderModel,
    bound: &Bound,
    projections: &[Var],
    batch: &Batch,
    targets: &TeacherTargets,
    config: &DistillConfig,
) -> Result<DistillLosses, DistillError> {
    let rows = prediction_rows(batch, config.positions);
    if rows.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let enc = student.encode(tape, bound, &batch.ids, &batch.lengths, batch.max_len)?;
    let layer = hidden_loss(
        tape,
        &enc.hidden_states,
        &targets.hidden_states,
        projections,
        &config.layer_map,
        &batch.real_positions(),
    )?;
    let logits = student.mlm_logits(tape, bound, enc.last(), Some(&rows))?;
    let prediction = prediction_loss(tape, logits, &targets.logits, config.temperature, &vec![true; rows.len()])?;
    let total = total_distill_loss(tape, layer, prediction, config.hidden_weight, config.prediction_weight)?;
    Ok(DistillLosses { layer, prediction, total })
}
