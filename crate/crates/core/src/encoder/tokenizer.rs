//! Whitespace tokenizer with a closed vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    /// Reserved tokens first, then every distinct lowercase word in
    /// first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for text in texts {
            for w in words(text) {
                if !index.contains_key(&w) {
                    index.insert(w.clone(), tokens.len() as u32);
                    tokens.push(w);
                }
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    /// `[CLS] w… [SEP]`, truncated to `max_len` ids (the final `[SEP]` is kept).
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        self.encode_segments(&[text], max_len)
    }

    /// `[CLS] a… [SEP] b… [SEP]` for each non-empty segment, truncated to `max_len`.
    pub fn encode_segments(&self, segments: &[&str], max_len: usize) -> Vec<u32> {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let mut ids = vec![CLS];
        for seg in segments.iter().filter(|s| !s.trim().is_empty()) {
            ids.extend(words(seg).map(|w| self.id(&w)));
            ids.push(SEP);
        }
        if ids.len() == 1 {
            ids.push(SEP);
        }
        if ids.len() > max_len {
            ids.truncate(max_len - 1);
            ids.push(SEP);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_lowercasing() {
        let v = Vocab::build(["Hello world", "hello THERE"]);
        assert_eq!(v.token(CLS), Some("[CLS]"));
        assert_eq!(v.len(), 4 + 3);
        assert_eq!(
            v.encode("HELLO there unknown", 16),
            vec![CLS, 4, 6, UNK, SEP]
        );
    }

    #[test]
    fn truncation_keeps_sep() {
        let v = Vocab::build(["a b c d e"]);
        let ids = v.encode("a b c d e", 4);
        assert_eq!(ids, vec![CLS, 4, 5, SEP]);
    }

    #[test]
    fn segments() {
        let v = Vocab::build(["t x"]);
        assert_eq!(
            v.encode_segments(&["t", "x"], 10),
            vec![CLS, 4, SEP, 5, SEP]
        );
        assert_eq!(v.encode_segments(&["", "x"], 10), vec![CLS, 5, SEP]);
    }

    #[test]
    fn serde_roundtrip_reindexes() {
        let v = Vocab::build(["alpha beta"]);
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocab = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back, v);
        assert_eq!(back.id("beta"), 5);
    }
}
