use std::collections::HashMap;
use std::path::Path;

use super::TextError;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Prefix marking a word piece that continues the previous one.
pub const CONTINUATION: &str = "##";

pub const PAD_ID: usize = 0;

/// Bijective token ↔ id table. `[PAD]` is always id 0; the other reserved
/// tokens appear exactly once at any position.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
    cls: usize,
    sep: usize,
    mask: usize,
    /// Ids eligible as random replacements (everything but reserved tokens).
    ordinary: Vec<usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, TextError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(TextError::Vocab(format!("empty token at line {}", id + 1)));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(TextError::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        if tokens.first().map(String::as_str) != Some(PAD) {
            return Err(TextError::Vocab(format!("{PAD} must have id 0")));
        }
        let find = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| TextError::Vocab(format!("missing reserved token {t}")))
        };
        let (unk, cls, sep, mask) = (find(UNK)?, find(CLS)?, find(SEP)?, find(MASK)?);
        let ordinary = (0..tokens.len())
            .filter(|&i| !RESERVED.contains(&tokens[i].as_str()))
            .collect();
        Ok(Self { tokens, index, unk, cls, sep, mask, ordinary })
    }

    /// Reserved tokens first, then `content` in order with duplicates and
    /// reserved names dropped.
    pub fn with_reserved<I, S>(content: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for t in content {
            let t = t.into();
            if !t.is_empty() && seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::new(tokens)
    }

    /// One token per line; the line number is the id.
    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| TextError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn pad_id(&self) -> usize {
        PAD_ID
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn ordinary_ids(&self) -> &[usize] {
        &self.ordinary
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        [PAD_ID, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_layout_and_round_trip() {
        let v = Vocab::with_reserved(["使", "用", "pro", "##lity", "使"]).unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(v.id(PAD), Some(0));
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        assert_eq!(v.ordinary_ids(), &[5, 6, 7, 8]);
    }

    #[test]
    fn rejects_bad_tables() {
        let s = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(Vocab::new(s(&[UNK, PAD, CLS, SEP, MASK])).is_err());
        assert!(Vocab::new(s(&[PAD, UNK, CLS, SEP])).is_err());
        assert!(Vocab::new(s(&[PAD, UNK, CLS, SEP, MASK, "a", "a"])).is_err());
        assert!(Vocab::new(s(&[PAD, CLS, UNK, MASK, SEP, "a"])).is_ok());
    }
}
