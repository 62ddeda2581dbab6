//! Vocabulary, tokenization, word segmentation and dynamic masked-sample
//! generation.

mod batch;
mod masking;
mod segment;
mod tokenize;
mod vocab;

use std::path::{Path, PathBuf};

pub use batch::{build_batch, Batch};
pub use masking::{
    apply_selections, generate_char_mask_sample, generate_wwm_sample, mask_target, MaskDecision,
    MaskedSample, Selection, DEFAULT_MASK_RATE, IGNORE_LABEL,
};
pub use segment::{segment_words, spans_tile, Lexicon, WordSpan};
pub use tokenize::{is_cjk, is_cjk_token, is_continuation, tokenize, wordpiece, Token};
pub use vocab::{Vocab, CLS, CONTINUATION, MASK, PAD, PAD_ID, RESERVED, SEP, UNK};

use crate::parallel;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TextError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("no maskable tokens")]
    EmptySample,
    #[error("mask rate must lie in (0, 1), got {0}")]
    MaskRate(f64),
    #[error("word spans do not tile the token sequence")]
    SpansDoNotTile,
    #[error("cannot build an empty batch")]
    EmptyBatch,
    #[error("max_len {0} leaves no room for content between [CLS] and [SEP]")]
    MaxLen(usize),
    #[error("corpus {0} has no sentences")]
    EmptyCorpus(PathBuf),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl TextError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Masking granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    WholeWord,
    Token,
}

/// A tokenized, segmented sentence ready for repeated masking.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub tokens: Vec<Token>,
    pub ids: Vec<usize>,
    pub spans: Vec<WordSpan>,
}

impl Encoded {
    pub fn new(text: &str, vocab: &Vocab, lexicon: &Lexicon) -> Self {
        let tokens = tokenize(text, vocab);
        let ids = tokens.iter().map(|t| t.id).collect();
        let spans = segment_words(&tokens, lexicon);
        Self { tokens, ids, spans }
    }

    /// Drops everything past the first `max_tokens` tokens, cutting a span
    /// that straddles the boundary.
    pub fn truncate(&mut self, max_tokens: usize) {
        if self.ids.len() <= max_tokens {
            return;
        }
        self.tokens.truncate(max_tokens);
        self.ids.truncate(max_tokens);
        self.spans.retain(|s| s.start < max_tokens);
        if let Some(last) = self.spans.last_mut() {
            last.end = last.end.min(max_tokens);
        }
    }

    pub fn mask(&self, vocab: &Vocab, strategy: MaskStrategy, mask_rate: f64, seed: u64) -> Result<MaskedSample, TextError> {
        match strategy {
            MaskStrategy::WholeWord => generate_wwm_sample(&self.ids, &self.spans, vocab, mask_rate, seed),
            MaskStrategy::Token => generate_char_mask_sample(&self.ids, vocab, mask_rate, seed),
        }
    }
}

/// Non-empty, trimmed lines of a UTF-8 corpus file.
pub fn load_corpus(path: &Path) -> Result<Vec<String>, TextError> {
    let text = std::fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        return Err(TextError::EmptyCorpus(path.to_path_buf()));
    }
    Ok(lines)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for masking sentence `index` in `epoch` of a run seeded with `base`:
/// `s(s(s(base) ^ epoch) ^ index)` with `s` the SplitMix64 finalizer. Every
/// sentence gets an independent stream, so generation order does not matter.
pub fn derive_seed(base: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ epoch) ^ index)
}

/// Masks `sentences[i]` with `derive_seed(base, epoch, indices[i])`, in parallel
/// when enabled. Output order follows `indices`.
pub fn mask_many(
    sentences: &[Encoded],
    indices: &[usize],
    vocab: &Vocab,
    strategy: MaskStrategy,
    mask_rate: f64,
    base: u64,
    epoch: u64,
) -> Result<Vec<MaskedSample>, TextError> {
    parallel::map_indexed(indices.len(), |k| {
        let i = indices[k];
        sentences[i].mask(vocab, strategy, mask_rate, derive_seed(base, epoch, i as u64))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_per_coordinate() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(2, 0, 0));
        assert_eq!(a, derive_seed(1, 0, 0));
    }

    #[test]
    fn truncation_cuts_straddling_span() {
        let v = Vocab::with_reserved(["语", "言", "模", "型"]).unwrap();
        let lex = Lexicon::new(["语言", "模型"]).unwrap();
        let mut e = Encoded::new("语言模型", &v, &lex);
        e.truncate(3);
        assert_eq!(e.spans, vec![WordSpan::new(0, 2), WordSpan::new(2, 3)]);
        assert!(spans_tile(&e.spans, e.ids.len()));
    }
}
