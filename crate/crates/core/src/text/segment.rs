//! Lexicon-driven word segmentation by forward maximum matching.

use std::collections::HashSet;
use std::path::Path;

use super::tokenize::{is_cjk_token, is_continuation};
use super::TextError;

/// Half-open token range `[start, end)` treated as one masking unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Dictionary of multi-character words.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    words: HashSet<String>,
    max_chars: usize,
}

impl Lexicon {
    pub fn new<I, S>(words: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut lex = Self::default();
        for w in words {
            let w: String = w.into();
            if w.is_empty() {
                return Err(TextError::Lexicon("empty entry".into()));
            }
            lex.max_chars = lex.max_chars.max(w.chars().count());
            lex.words.insert(w);
        }
        Ok(lex)
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn max_chars(&self) -> usize {
        self.max_chars
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// Groups tokens into word spans.
///
/// Runs of single CJK characters are segmented by forward maximum matching
/// against `lexicon`; characters that start no lexicon word become singleton
/// spans. A word-piece head together with its `##` continuations is one span.
/// Every other token is a singleton. The spans tile `0..tokens.len()`.
pub fn segment_words<T: AsRef<str>>(tokens: &[T], lexicon: &Lexicon) -> Vec<WordSpan> {
    let n = tokens.len();
    let text = |i: usize| tokens[i].as_ref();
    let mut spans: Vec<WordSpan> = Vec::new();
    let mut i = 0;
    while i < n {
        if is_cjk_token(text(i)) {
            let run_end = (i..n).find(|&j| !is_cjk_token(text(j))).unwrap_or(n);
            let longest = lexicon.max_chars().min(run_end - i);
            let mut len = 1;
            for cand in (2..=longest).rev() {
                let word: String = (i..i + cand).map(text).collect();
                if lexicon.contains(&word) {
                    len = cand;
                    break;
                }
            }
            spans.push(WordSpan::new(i, i + len));
            i += len;
        } else if is_continuation(text(i)) {
            // Only reachable on hand-built input: a continuation with no head.
            match spans.last_mut() {
                Some(prev) if prev.end == i => prev.end += 1,
                _ => spans.push(WordSpan::new(i, i + 1)),
            }
            i += 1;
        } else {
            let mut j = i + 1;
            while j < n && is_continuation(text(j)) {
                j += 1;
            }
            spans.push(WordSpan::new(i, j));
            i = j;
        }
    }
    spans
}

/// Checks that `spans` are ordered, non-overlapping and cover `0..len`.
pub fn spans_tile(spans: &[WordSpan], len: usize) -> bool {
    let mut pos = 0;
    for s in spans {
        if s.start != pos || s.end <= s.start {
            return false;
        }
        pos = s.end;
    }
    pos == len
}
