//! Labeled sentence-classification data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;

/// `(label, text)` examples with dense labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub examples: Vec<(usize, String)>,
    pub classes: usize,
}

impl TaskDataset {
    pub fn new(examples: Vec<(usize, String)>, classes: usize) -> Result<Self, EvalError> {
        if classes < 2 {
            return Err(EvalError::Data(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&(label, _)) = examples.iter().find(|(l, _)| *l >= classes) {
            return Err(EvalError::Label { label, classes });
        }
        Ok(Self { examples, classes })
    }

    /// One `label<TAB>text` example per line; blank lines are skipped. The
    /// class count is the largest label plus one and every class must occur.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| EvalError::Parse { line: i + 1, message };
            let (label, body) = line.split_once('\t').ok_or_else(|| err("expected label<TAB>text".into()))?;
            let label: usize = label.trim().parse().map_err(|_| err(format!("bad label {label:?}")))?;
            let body = body.trim();
            if body.is_empty() {
                return Err(err("empty text".into()));
            }
            examples.push((label, body.to_string()));
        }
        let classes = examples.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        if let Some(missing) = (0..classes).find(|c| !examples.iter().any(|e| e.0 == *c)) {
            return Err(EvalError::Data(format!("class {missing} has no examples; labels must be dense")));
        }
        Self::new(examples, classes)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        self.examples.iter().map(|(l, t)| format!("{l}\t{t}\n")).collect()
    }

    /// Seeded shuffle, then the last `dev_fraction` (at least one example)
    /// becomes the dev split.
    pub fn split(&self, dev_fraction: f64, seed: u64) -> Result<TaskSplit, EvalError> {
        if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
            return Err(EvalError::Data(format!("dev fraction must lie in (0, 1), got {dev_fraction}")));
        }
        if self.examples.len() < 2 {
            return Err(EvalError::Data("need at least two examples to split".into()));
        }
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_dev = ((dev_fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
        let dev_idx = order.split_off(order.len() - n_dev);
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.examples[i].clone()).collect();
        Ok(TaskSplit { train: pick(&order), dev: pick(&dev_idx), classes: self.classes })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<(usize, String)>,
    pub dev: Vec<(usize, String)>,
    pub classes: usize,
}

impl TaskSplit {
    /// Fraction of dev examples in the most frequent training class.
    pub fn majority_baseline(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        self.train.iter().for_each(|(l, _)| counts[*l] += 1);
        let major = (0..self.classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
        self.dev.iter().filter(|(l, _)| *l == major).count() as f64 / self.dev.len().max(1) as f64
    }
}
