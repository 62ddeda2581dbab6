//! Character-level splitting for CJK text and greedy WordPiece for Latin runs.

use super::vocab::{Vocab, CONTINUATION, UNK};

/// Words longer than this many characters become `[UNK]` outright.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub id: usize,
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

/// CJK ideograph blocks (unified, extensions A–F, compatibility).
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F
        | 0x2B820..=0x2CEAF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

/// True when `token` is exactly one CJK character.
pub fn is_cjk_token(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if is_cjk(c))
}

pub fn is_continuation(token: &str) -> bool {
    token.starts_with(CONTINUATION) && token.len() > CONTINUATION.len()
}

fn single(c: char, vocab: &Vocab) -> Token {
    let text = c.to_string();
    match vocab.id(&text) {
        Some(id) => Token { text, id },
        None => unk(vocab),
    }
}

fn unk(vocab: &Vocab) -> Token {
    Token { text: UNK.to_string(), id: vocab.unk_id() }
}

/// Greedy longest-match-first WordPiece. A word that cannot be covered is a
/// single `[UNK]`.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<Token> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![unk(vocab)];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let body: String = chars[start..end].iter().collect();
            let cand = if start == 0 { body } else { format!("{CONTINUATION}{body}") };
            if let Some(id) = vocab.id(&cand) {
                found = Some(Token { text: cand, id });
                break;
            }
            end -= 1;
        }
        match found {
            Some(tok) => pieces.push(tok),
            None => return vec![unk(vocab)],
        }
        start = end;
    }
    pieces
}

/// Splits `text` into vocabulary tokens: each CJK character is its own token,
/// contiguous alphanumeric runs go through [`wordpiece`], whitespace separates,
/// and any other character stands alone.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<Token>| {
        if !word.is_empty() {
            out.extend(wordpiece(word, vocab));
            word.clear();
        }
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if is_cjk(c) {
            flush(&mut word, &mut out);
            out.push(single(c, vocab));
        } else if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(single(c, vocab));
        }
    }
    flush(&mut word, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(toks: &[Token]) -> Vec<&str> {
        toks.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn cjk_split_per_character() {
        let v = Vocab::with_reserved(["使", "用", "语", "言"]).unwrap();
        assert_eq!(texts(&tokenize("使用语言", &v)), ["使", "用", "语", "言"]);
        assert!(tokenize("", &v).is_empty());
    }

    #[test]
    fn greedy_longest_match_trace() {
        // "probability": "pro" is the longest head; the remainder "bability"
        // matches "##bability" in full, so greedy stops after two pieces.
        let v = Vocab::with_reserved(["pro", "##bability", "##lity", "##babi"]).unwrap();
        assert_eq!(texts(&tokenize("probability", &v)), ["pro", "##bability"]);
        // Without the long continuation: "##babi" then "##lity".
        let v = Vocab::with_reserved(["pro", "##lity", "##babi"]).unwrap();
        assert_eq!(texts(&tokenize("probability", &v)), ["pro", "##babi", "##lity"]);
    }

    #[test]
    fn unknown_material_is_unk() {
        let v = Vocab::with_reserved(["使", "pro"]).unwrap();
        let toks = tokenize("使龘 prox ,", &v);
        assert_eq!(texts(&toks), ["使", UNK, UNK, UNK]);
        assert!(toks[1..].iter().all(|t| t.id == v.unk_id()));
    }
}
