//! Seeded generators for a small CJK/Latin corpus, its lexicon and vocabulary,
//! and a keyword-labelled classification task over the same language.
//!
//! The language is a topic grammar: every sentence picks one topic and fills
//! a template with that topic's nouns, verbs and modifiers, so a model that
//! has learned the topic structure can predict masked words from context.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::{TextError, Vocab, RESERVED};

/// Latin word pieces added to every generated vocabulary.
pub const LATIN_PIECES: [&str; 12] = [
    "pro", "##babi", "##lity", "data", "##set", "model", "##ing", "token", "##izer", "learn", "##er", "x",
];
/// Whole Latin words the grammar may insert; each tokenizes into the pieces above.
pub const LATIN_WORDS: [&str; 8] = ["probability", "dataset", "modeling", "tokenizer", "learner", "data", "model", "token"];

const FUNCTION_WORDS: [&str; 6] = ["的", "了", "在", "和", "是", "把"];
const PUNCTUATION: [&str; 2] = ["。", "，"];
const TOPICS: usize = 8;
const CJK_START: u32 = 0x4E00;

#[derive(Debug, Clone, PartialEq)]
struct Topic {
    nouns: Vec<String>,
    verbs: Vec<String>,
    modifiers: Vec<String>,
    latin: &'static str,
}

/// A generated language: vocabulary, lexicon words and the topic grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    pub vocab: Vocab,
    /// Multi-character words, suitable as a segmentation lexicon.
    pub words: Vec<String>,
    topics: Vec<Topic>,
}

fn cjk_chars(skip: &[&str], n: usize) -> Vec<String> {
    (CJK_START..)
        .filter_map(char::from_u32)
        .map(String::from)
        .filter(|c| !skip.contains(&c.as_str()))
        .take(n)
        .collect()
}

impl Language {
    /// Builds a language whose vocabulary has exactly `vocab_size` entries.
    /// Every content character belongs to exactly one word.
    pub fn generate(vocab_size: usize, seed: u64) -> Result<Self, TextError> {
        let fixed = RESERVED.len() + LATIN_PIECES.len() + FUNCTION_WORDS.len() + PUNCTUATION.len();
        let min_chars = TOPICS * 3 * 2;
        if vocab_size < fixed + min_chars {
            return Err(TextError::Vocab(format!(
                "vocabulary of {vocab_size} is too small for the grammar (need at least {})",
                fixed + min_chars
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut skip: Vec<&str> = FUNCTION_WORDS.to_vec();
        skip.extend(PUNCTUATION);
        let mut chars = cjk_chars(&skip, vocab_size - fixed);
        let content = chars.clone();
        chars.shuffle(&mut rng);

        // Cut the shuffled characters into words of two or three characters.
        let mut words = Vec::new();
        let mut rest = &chars[..];
        while !rest.is_empty() {
            let len = if rest.len() <= 3 { rest.len() } else { rng.random_range(2..=3) };
            let len = if rest.len() - len == 1 { len + 1 } else { len };
            words.push(rest[..len].concat());
            rest = &rest[len..];
        }

        let mut topics: Vec<Topic> = (0..TOPICS)
            .map(|t| Topic {
                nouns: Vec::new(),
                verbs: Vec::new(),
                modifiers: Vec::new(),
                latin: LATIN_WORDS[t % LATIN_WORDS.len()],
            })
            .collect();
        for (i, w) in words.iter().enumerate() {
            let topic = &mut topics[i % TOPICS];
            match (i / TOPICS) % 4 {
                0 | 1 => topic.nouns.push(w.clone()),
                2 => topic.verbs.push(w.clone()),
                _ => topic.modifiers.push(w.clone()),
            }
        }
        for t in &mut topics {
            if t.verbs.is_empty() {
                t.verbs.push(t.nouns.pop().expect("at least three words per topic"));
            }
            if t.modifiers.is_empty() {
                t.modifiers.push(t.nouns.pop().expect("at least three words per topic"));
            }
        }

        let mut tokens: Vec<String> = content;
        tokens.extend(FUNCTION_WORDS.map(String::from));
        tokens.extend(PUNCTUATION.map(String::from));
        tokens.extend(LATIN_PIECES.map(String::from));
        let vocab = Vocab::with_reserved(tokens)?;
        debug_assert_eq!(vocab.len(), vocab_size);
        Ok(Self { vocab, words, topics })
    }

    /// Lexicon file contents, one word per line.
    pub fn lexicon_text(&self) -> String {
        let mut s = String::from("# generated lexicon\n");
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    /// Vocabulary file contents, one token per line.
    pub fn vocab_text(&self) -> String {
        self.vocab.tokens().iter().map(|t| format!("{t}\n")).collect()
    }

    fn clause<R: Rng>(&self, topic: &Topic, rng: &mut R, with_modifier: bool) -> String {
        let pick = |v: &[String], rng: &mut R| v.choose(rng).unwrap().clone();
        let mut s = pick(&topic.nouns, rng);
        s.push_str(*FUNCTION_WORDS[1..].choose(rng).unwrap());
        s.push_str(&pick(&topic.verbs, rng));
        if with_modifier {
            s.push_str(&pick(&topic.modifiers, rng));
            s.push_str(FUNCTION_WORDS[0]);
        }
        s.push_str(&pick(&topic.nouns, rng));
        s
    }

    /// One sentence of 1–2 clauses from a single topic, sometimes with a
    /// Latin word.
    pub fn sentence<R: Rng>(&self, rng: &mut R) -> String {
        let topic = &self.topics[rng.random_range(0..self.topics.len())];
        let mut s = self.clause(topic, rng, true);
        if rng.random_bool(0.3) {
            s.push(' ');
            s.push_str(topic.latin);
            s.push(' ');
        }
        if rng.random_bool(0.5) {
            s.push_str(PUNCTUATION[1]);
            let with_modifier = rng.random_bool(0.5);
            s.push_str(&self.clause(topic, rng, with_modifier));
        }
        s.push_str(PUNCTUATION[0]);
        s
    }

    pub fn corpus(&self, sentences: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sentences).map(|_| self.sentence(&mut rng)).collect()
    }

    /// Keyword words for the two classes of the toy task: one modifier from
    /// each topic in the first half of the topics versus the second half.
    /// The short lists keep every keyword frequent in any training split.
    pub fn class_keywords(&self) -> [Vec<String>; 2] {
        let half = self.topics.len() / 2;
        let take = |ts: &[Topic]| ts.iter().map(|t| t.modifiers[0].clone()).collect();
        [take(&self.topics[..half]), take(&self.topics[half..])]
    }

    /// `(label, text)` pairs: a modifier-free sentence with one class keyword
    /// inserted at a clause boundary. The keyword alone determines the label.
    pub fn task_examples(&self, n: usize, seed: u64) -> Vec<(usize, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keywords = self.class_keywords();
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..2);
                let topic = &self.topics[rng.random_range(0..self.topics.len())];
                let key = keywords[label].choose(&mut rng).unwrap();
                let a = self.clause(topic, &mut rng, false);
                let b = self.clause(topic, &mut rng, false);
                let text = if rng.random_bool(0.5) {
                    format!("{key}{}{a}{}{b}{}", PUNCTUATION[1], PUNCTUATION[1], PUNCTUATION[0])
                } else {
                    format!("{a}{}{b}{key}{}", PUNCTUATION[1], PUNCTUATION[0])
                };
                (label, text)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, Encoded, Lexicon};

    #[test]
    fn vocabulary_has_requested_size_and_covers_corpus() {
        let lang = Language::generate(512, 1).unwrap();
        assert_eq!(lang.vocab.len(), 512);
        let lexicon = Lexicon::parse(&lang.lexicon_text()).unwrap();
        let corpus = lang.corpus(500, 2);
        for s in &corpus {
            let enc = Encoded::new(s, &lang.vocab, &lexicon);
            assert!(!enc.ids.contains(&lang.vocab.unk_id()), "{s}");
            assert!(enc.spans.iter().any(|sp| sp.len() > 1));
        }
        for w in LATIN_WORDS {
            assert!(tokenize(w, &lang.vocab).iter().all(|t| t.id != lang.vocab.unk_id()));
        }
        assert!(Language::generate(40, 0).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let a = Language::generate(300, 5).unwrap();
        assert_eq!(a, Language::generate(300, 5).unwrap());
        assert_ne!(a.words, Language::generate(300, 6).unwrap().words);
        assert_eq!(a.corpus(10, 1), a.corpus(10, 1));
        assert_eq!(a.task_examples(10, 1), a.task_examples(10, 1));
    }

    #[test]
    fn keywords_are_disjoint() {
        let lang = Language::generate(512, 3).unwrap();
        let [a, b] = lang.class_keywords();
        assert!(!a.is_empty() && !b.is_empty());
        assert!(a.iter().all(|w| !b.contains(w)));
    }
}
