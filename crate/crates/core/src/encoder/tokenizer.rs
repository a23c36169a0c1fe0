use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Whitespace word-level tokenizer with BERT-style reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from words in order of first appearance.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tok = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in SPECIALS {
            tok.push(w);
        }
        for w in words {
            tok.push(w.as_ref());
        }
        tok
    }

    /// Restores a vocabulary saved with [`Tokenizer::words`].
    pub fn from_vocab(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data("vocabulary does not start with the reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Self { words, ids })
    }

    fn push(&mut self, word: &str) {
        if word.is_empty() || self.ids.contains_key(word) {
            return;
        }
        self.ids.insert(word.to_owned(), self.words.len());
        self.words.push(word.to_owned());
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Ids of the whitespace-separated words, failing on out-of-vocabulary words.
    pub fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Data(format!("word `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    /// `[CLS] words… [SEP]`
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![CLS];
        ids.extend(self.encode_words(text)?);
        ids.push(SEP);
        Ok(ids)
    }

    /// Words joined by spaces; `[CLS]`, `[SEP]` and `[PAD]` are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, CLS | SEP | PAD))
            .map(|&i| self.word(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_come_first() {
        let tok = Tokenizer::from_words(["he", "is", "he"]);
        assert_eq!(tok.id("[CLS]"), Some(CLS));
        assert_eq!(tok.id("[MASK]"), Some(MASK));
        assert_eq!(tok.id("he"), Some(5));
        assert_eq!(tok.vocab_size(), 7);
    }

    #[test]
    fn encode_decode_round_trip() {
        let tok = Tokenizer::from_words(["the", "doctor", "smiled"]);
        let ids = tok.encode("the doctor smiled").unwrap();
        assert_eq!(ids, vec![CLS, 5, 6, 7, SEP]);
        assert_eq!(tok.decode(&ids), "the doctor smiled");
        assert!(matches!(tok.encode("the nurse"), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_restore() {
        let tok = Tokenizer::from_words(["a", "b"]);
        let restored = Tokenizer::from_vocab(tok.words().to_vec()).unwrap();
        assert_eq!(tok, restored);
        assert!(Tokenizer::from_vocab(vec!["a".into()]).is_err());
    }
}
