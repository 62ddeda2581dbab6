use serde::Serialize;

use super::masking::{MaskedSample, IGNORE_LABEL};
use super::vocab::Vocab;
use super::TextError;

/// Padded, framed batch: `[CLS] content [SEP] [PAD]...` per row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub labels: Vec<i64>,
    /// Real (non-pad) length of each row including `[CLS]` and `[SEP]`.
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub max_len: usize,
}

impl Batch {
    /// Flat row-major positions (`row * max_len + col`) carrying a label.
    pub fn labeled_positions(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != IGNORE_LABEL).collect()
    }

    pub fn labeled_targets(&self) -> Vec<usize> {
        self.labels
            .iter()
            .filter(|&&l| l != IGNORE_LABEL)
            .map(|&l| l as usize)
            .collect()
    }

    /// Flat positions of every non-pad token.
    pub fn real_positions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (b, &len) in self.lengths.iter().enumerate() {
            out.extend((0..len).map(|j| b * self.max_len + j));
        }
        out
    }
}

/// Frames and pads samples. Content longer than `max_len − 2` keeps its
/// first `max_len − 2` tokens.
pub fn build_batch(samples: &[MaskedSample], vocab: &Vocab, max_len: usize) -> Result<Batch, TextError> {
    if samples.is_empty() {
        return Err(TextError::EmptyBatch);
    }
    if max_len < 3 {
        return Err(TextError::MaxLen(max_len));
    }
    let mut ids = vec![vocab.pad_id(); samples.len() * max_len];
    let mut labels = vec![IGNORE_LABEL; samples.len() * max_len];
    let mut lengths = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        let keep = s.input_ids.len().min(max_len - 2);
        let row = b * max_len;
        ids[row] = vocab.cls_id();
        ids[row + 1..row + 1 + keep].copy_from_slice(&s.input_ids[..keep]);
        labels[row + 1..row + 1 + keep].copy_from_slice(&s.labels[..keep]);
        ids[row + 1 + keep] = vocab.sep_id();
        lengths.push(keep + 2);
    }
    Ok(Batch {
        ids,
        labels,
        lengths,
        batch_size: samples.len(),
        max_len,
    })
}
