//! Training data: the encoded corpus split and the per-step batch stream.
//!
//! The batch for step `s` depends only on `(seed, s)`: sentence order is a
//! fresh shuffle per epoch and every sentence is masked with
//! `derive_seed(seed, epoch, index)`, so resuming needs nothing beyond the
//! step counter.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::text::{build_batch, derive_seed, mask_many, Batch, Encoded, Lexicon, MaskStrategy, TextError, Vocab};

/// Epoch tag used for the fixed held-out masks.
const HELDOUT_EPOCH: u64 = u64::MAX;
/// Index tag used for the per-epoch shuffle seed.
const SHUFFLE_INDEX: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub train: Vec<Encoded>,
    pub heldout: Vec<Encoded>,
}

impl Dataset {
    /// Encodes and truncates every sentence to `max_len − 2` tokens; the last
    /// `heldout_fraction` of the sentences form the held-out split.
    pub fn from_sentences(
        vocab: Vocab,
        lexicon: Lexicon,
        sentences: &[String],
        heldout_fraction: f64,
        max_len: usize,
    ) -> Result<Self, TrainError> {
        let mut encoded: Vec<Encoded> = sentences
            .iter()
            .map(|s| {
                let mut e = Encoded::new(s, &vocab, &lexicon);
                e.truncate(max_len.saturating_sub(2));
                e
            })
            .filter(|e| !e.ids.is_empty())
            .collect();
        if encoded.is_empty() {
            return Err(TrainError::Data(TextError::EmptySample));
        }
        let n_held = if heldout_fraction > 0.0 && encoded.len() > 1 {
            ((heldout_fraction * encoded.len() as f64).ceil() as usize).min(encoded.len() - 1)
        } else {
            0
        };
        let heldout = encoded.split_off(encoded.len() - n_held);
        Ok(Self { vocab, lexicon, train: encoded, heldout })
    }

    pub fn load(
        corpus: &std::path::Path,
        lexicon: &std::path::Path,
        vocab: &std::path::Path,
        heldout_fraction: f64,
        max_len: usize,
    ) -> Result<Self, TrainError> {
        let sentences = crate::text::load_corpus(corpus)?;
        Self::from_sentences(Vocab::load(vocab)?, Lexicon::load(lexicon)?, &sentences, heldout_fraction, max_len)
    }

    /// Held-out batches with fixed masks, `batch_size` sentences each.
    pub fn heldout_batches(
        &self,
        strategy: MaskStrategy,
        mask_rate: f64,
        seed: u64,
        batch_size: usize,
        max_len: usize,
    ) -> Result<Vec<Batch>, TrainError> {
        let indices: Vec<usize> = (0..self.heldout.len()).collect();
        let samples = mask_many(&self.heldout, &indices, &self.vocab, strategy, mask_rate, seed, HELDOUT_EPOCH)?;
        samples
            .chunks(batch_size.max(1))
            .map(|c| build_batch(c, &self.vocab, max_len).map_err(TrainError::from))
            .collect()
    }
}

/// Deterministic batch stream over the training split.
#[derive(Debug)]
pub struct DataStream<'a> {
    data: &'a Dataset,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub strategy: MaskStrategy,
    pub mask_rate: f64,
    order: Option<(u64, Vec<usize>)>,
}

impl<'a> DataStream<'a> {
    pub fn new(
        data: &'a Dataset,
        batch_size: usize,
        max_len: usize,
        seed: u64,
        strategy: MaskStrategy,
        mask_rate: f64,
    ) -> Self {
        Self { data, batch_size, max_len, seed, strategy, mask_rate, order: None }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.data.train.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch, SHUFFLE_INDEX)));
            self.order = Some((epoch, perm));
        }
        &self.order.as_ref().unwrap().1
    }

    /// Sentence indices and epochs making up the batch for `step`.
    pub fn indices(&mut self, step: u64) -> Vec<(u64, usize)> {
        let n = self.data.train.len() as u64;
        let first = step * self.batch_size as u64;
        (first..first + self.batch_size as u64)
            .map(|k| {
                let epoch = k / n;
                (epoch, self.permutation(epoch)[(k % n) as usize])
            })
            .collect()
    }

    pub fn batch(&mut self, step: u64) -> Result<Batch, TrainError> {
        let picks = self.indices(step);
        let mut samples = Vec::with_capacity(picks.len());
        // group consecutive picks by epoch so each group is masked in one call
        let mut start = 0;
        while start < picks.len() {
            let epoch = picks[start].0;
            let end = start + picks[start..].iter().take_while(|(e, _)| *e == epoch).count();
            let idx: Vec<usize> = picks[start..end].iter().map(|&(_, i)| i).collect();
            samples.extend(mask_many(
                &self.data.train,
                &idx,
                &self.data.vocab,
                self.strategy,
                self.mask_rate,
                self.seed,
                epoch,
            )?);
            start = end;
        }
        Ok(build_batch(&samples, &self.data.vocab, self.max_len)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset() -> Dataset {
        let vocab = Vocab::with_reserved(["甲", "乙", "丙", "丁"]).unwrap();
        let lexicon = Lexicon::new(["甲乙"]).unwrap();
        let sentences: Vec<String> = (0..10).map(|i| "甲乙丙丁".repeat(i % 3 + 1)).collect();
        Dataset::from_sentences(vocab, lexicon, &sentences, 0.2, 8).unwrap()
    }

    #[test]
    fn split_and_truncation() {
        let d = dataset();
        assert_eq!((d.train.len(), d.heldout.len()), (8, 2));
        assert!(d.train.iter().all(|e| e.ids.len() <= 6));
    }

    #[test]
    fn each_epoch_visits_every_sentence_once() {
        let d = dataset();
        let mut s = DataStream::new(&d, 3, 8, 1, MaskStrategy::WholeWord, 0.15);
        let picks: Vec<(u64, usize)> = (0..8).flat_map(|step| s.indices(step)).collect();
        for epoch in 0..2 {
            let mut seen: Vec<usize> = picks.iter().filter(|p| p.0 == epoch).map(|p| p.1).collect();
            seen.sort();
            assert_eq!(seen, (0..8).collect::<Vec<_>>());
        }
        let first: Vec<usize> = picks[..8].iter().map(|p| p.1).collect();
        let second: Vec<usize> = picks[8..16].iter().map(|p| p.1).collect();
        assert_ne!(first, second);
    }

    #[test]
    fn batches_are_pure_in_seed_and_step() {
        let d = dataset();
        let mut a = DataStream::new(&d, 3, 8, 1, MaskStrategy::WholeWord, 0.15);
        let mut b = DataStream::new(&d, 3, 8, 1, MaskStrategy::WholeWord, 0.15);
        let forward: Vec<Batch> = (0..6).map(|s| a.batch(s).unwrap()).collect();
        for s in (0..6).rev() {
            assert_eq!(b.batch(s).unwrap(), forward[s as usize]);
        }
        let mut c = DataStream::new(&d, 3, 8, 2, MaskStrategy::WholeWord, 0.15);
        assert_ne!(c.batch(0).unwrap(), forward[0]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let vocab = Vocab::with_reserved(["甲"]).unwrap();
        let r = Dataset::from_sentences(vocab, Lexicon::default(), &["   ".to_string()], 0.1, 8);
        assert!(r.is_err());
    }
}
