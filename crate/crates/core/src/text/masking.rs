//! MLM training-sample generation: whole-word masking and the per-token baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::segment::{spans_tile, WordSpan};
use super::vocab::Vocab;
use super::TextError;

/// Label value at positions that do not contribute to the MLM loss.
pub const IGNORE_LABEL: i64 = -100;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// What happens to the tokens of one selected unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDecision {
    /// Every token becomes `[MASK]` (80%).
    Mask,
    /// Every token becomes a uniformly drawn ordinary vocabulary id (10%).
    Random,
    /// Tokens stay as they are but are still predicted (10%).
    Keep,
}

impl MaskDecision {
    pub const MASK_PROB: f64 = 0.8;
    pub const RANDOM_PROB: f64 = 0.1;

    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        let u: f64 = rng.random();
        if u < Self::MASK_PROB {
            Self::Mask
        } else if u < Self::MASK_PROB + Self::RANDOM_PROB {
            Self::Random
        } else {
            Self::Keep
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Selection {
    pub span: WordSpan,
    pub decision: MaskDecision,
}

/// One masked training example (no `[CLS]`/`[SEP]` framing yet).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskedSample {
    pub input_ids: Vec<usize>,
    /// Original id at selected positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Vec<i64>,
    pub attention_len: usize,
    /// Selected units ordered by position.
    pub selections: Vec<Selection>,
}

impl MaskedSample {
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

fn validate_rate(mask_rate: f64) -> Result<(), TextError> {
    if mask_rate > 0.0 && mask_rate < 1.0 {
        Ok(())
    } else {
        Err(TextError::MaskRate(mask_rate))
    }
}

/// Number of tokens the selector aims for: `round(rate · n)`, at least one.
pub fn mask_target(n: usize, mask_rate: f64) -> usize {
    ((mask_rate * n as f64).round() as usize).max(1)
}

/// Picks whole units in a random order until at least [`mask_target`] tokens
/// are covered.
///
/// Units that would overshoot the target are passed over on the first sweep
/// so the realized rate stays close to `mask_rate`. If the first sweep ends
/// short of the target, the first skipped unit in the shuffled order is added.
/// At least one unit is always selected.
fn select_units<R: Rng>(units: &[WordSpan], target: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(rng);
    let mut chosen = Vec::new();
    let mut covered = 0;
    let mut first_skipped = None;
    for &u in &order {
        if covered >= target {
            break;
        }
        let len = units[u].len();
        if covered + len > target {
            first_skipped.get_or_insert(u);
            continue;
        }
        covered += len;
        chosen.push(u);
    }
    if covered < target {
        if let Some(u) = first_skipped {
            chosen.push(u);
        }
    }
    chosen
}

/// Rewrites `ids` for the given selections and builds the labels.
pub fn apply_selections<R: Rng>(
    ids: &[usize],
    selections: &[Selection],
    vocab: &Vocab,
    rng: &mut R,
) -> MaskedSample {
    let mut input_ids = ids.to_vec();
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    let ordinary = vocab.ordinary_ids();
    for sel in selections {
        for pos in sel.span.range() {
            labels[pos] = ids[pos] as i64;
            match sel.decision {
                MaskDecision::Mask => input_ids[pos] = vocab.mask_id(),
                MaskDecision::Random => {
                    input_ids[pos] = ordinary[rng.random_range(0..ordinary.len())];
                }
                MaskDecision::Keep => {}
            }
        }
    }
    let mut selections = selections.to_vec();
    selections.sort_by_key(|s| s.span.start);
    MaskedSample {
        input_ids,
        labels,
        attention_len: ids.len(),
        selections,
    }
}

fn generate(
    ids: &[usize],
    units: &[WordSpan],
    vocab: &Vocab,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedSample, TextError> {
    validate_rate(mask_rate)?;
    if ids.is_empty() {
        return Err(TextError::EmptySample);
    }
    if vocab.ordinary_ids().is_empty() {
        return Err(TextError::Vocab("no ordinary tokens to draw replacements from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = select_units(units, mask_target(ids.len(), mask_rate), &mut rng);
    let selections: Vec<Selection> = chosen
        .into_iter()
        .map(|u| Selection {
            span: units[u],
            decision: MaskDecision::draw(&mut rng),
        })
        .collect();
    Ok(apply_selections(ids, &selections, vocab, &mut rng))
}

/// Whole-word masking: every selected span is masked as a unit, with one
/// 80/10/10 decision per span.
pub fn generate_wwm_sample(
    ids: &[usize],
    spans: &[WordSpan],
    vocab: &Vocab,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedSample, TextError> {
    if !spans_tile(spans, ids.len()) {
        return Err(TextError::SpansDoNotTile);
    }
    generate(ids, spans, vocab, mask_rate, seed)
}

/// Baseline masking where every token is an independent unit.
pub fn generate_char_mask_sample(
    ids: &[usize],
    vocab: &Vocab,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedSample, TextError> {
    let units: Vec<WordSpan> = (0..ids.len()).map(|i| WordSpan::new(i, i + 1)).collect();
    generate(ids, &units, vocab, mask_rate, seed)
}
