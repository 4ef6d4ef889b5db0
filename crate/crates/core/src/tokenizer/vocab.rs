use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::tokenizer::{Modality, TokenSequence, TokenizerError};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const SOI: usize = 2;
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<soi>", "<eos>"];

/// Word-level vocabulary with reserved specials at indices 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabWords", into = "VocabWords")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabWords {
    words: Vec<String>,
}

impl From<VocabWords> for Vocab {
    fn from(v: VocabWords) -> Self {
        Self::from_words(v.words)
    }
}

impl From<Vocab> for VocabWords {
    fn from(v: Vocab) -> Self {
        Self { words: v.words }
    }
}

impl Vocab {
    /// Rebuilds a vocabulary from its full word list (specials included).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }
}

/// Lowercases and collapses whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Deterministic vocabulary: specials, then corpus words in lexicographic order.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut set = BTreeSet::new();
    for s in corpus {
        for w in normalize(s.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            if SPECIALS.contains(&w) {
                return Err(TokenizerError::ReservedWord(w.to_string()));
            }
            set.insert(w.to_string());
        }
    }
    let words = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
    Ok(Vocab::from_words(words))
}

/// Encodes `s` as word ids followed by EOS, PAD-padded to `max_len`.
pub fn encode_text(s: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence, TokenizerError> {
    let norm = normalize(s);
    let mut ids = Vec::new();
    for w in norm.split(' ').filter(|w| !w.is_empty()) {
        ids.push(vocab.id(w).ok_or_else(|| TokenizerError::OutOfVocabulary(w.to_string()))?);
    }
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(TokenizerError::TooLong { len: ids.len(), max: max_len });
    }
    let len = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence { modality: Modality::Text, indices: ids, len })
}

/// Inverse of [`encode_text`]: stops at EOS or PAD, skips other specials.
pub fn decode_text(tokens: &[usize], vocab: &Vocab) -> String {
    let mut out = Vec::new();
    for &t in tokens {
        if t == EOS || t == PAD {
            break;
        }
        if Vocab::is_special(t) {
            continue;
        }
        if let Some(w) = vocab.word(t) {
            out.push(w);
        }
    }
    out.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_then_sorted_words() {
        let v = build_vocab(&["a b", "b c"]).unwrap();
        assert_eq!(v.len(), 4 + 3);
        assert_eq!(v.word(PAD), Some("<pad>"));
        assert_eq!(&v.words()[4..], &["a", "b", "c"]);
    }

    #[test]
    fn deterministic() {
        let corpus = ["the cat", "a dog", "the dog"];
        assert_eq!(build_vocab(&corpus).unwrap(), build_vocab(&corpus).unwrap());
    }

    #[test]
    fn empty_sentence_is_eos_padded() {
        let v = build_vocab(&["a"]).unwrap();
        let seq = encode_text("", &v, 4).unwrap();
        assert_eq!(seq.indices, vec![EOS, PAD, PAD, PAD]);
        assert_eq!(seq.len, 1);
        assert_eq!(decode_text(&seq.indices, &v), "");
    }

    #[test]
    fn round_trip_normalizes() {
        let v = build_vocab(&["pororo walks"]).unwrap();
        let seq = encode_text("  Pororo   walks ", &v, 8).unwrap();
        assert_eq!(decode_text(&seq.indices, &v), "pororo walks");
    }

    #[test]
    fn oov_names_the_word() {
        let v = build_vocab(&["pororo walks"]).unwrap();
        assert_eq!(encode_text("crong walks", &v, 8), Err(TokenizerError::OutOfVocabulary("crong".into())));
    }

    #[test]
    fn too_long() {
        let v = build_vocab(&["a"]).unwrap();
        assert!(matches!(encode_text("a a a", &v, 3), Err(TokenizerError::TooLong { .. })));
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab(&["x y z"]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
