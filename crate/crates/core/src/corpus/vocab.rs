use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const NUM_RESERVED: usize = 5;

pub const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<mask>", "<cls>", "</s>"];

/// Whitespace vocabulary. Ids `0..5` are reserved; the rest are ordered by
/// descending frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocab {
    type Error = String;

    fn try_from(f: VocabFile) -> std::result::Result<Self, String> {
        if f.tokens.len() < NUM_RESERVED || f.tokens[..NUM_RESERVED] != RESERVED {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let index: HashMap<String, usize> =
            f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != f.tokens.len() {
            return Err("duplicate token in vocabulary".into());
        }
        Ok(Vocab {
            tokens: f.tokens,
            index,
        })
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocab {
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from no text".into()));
        }
        let counts = count_tokens(texts);
        let mut entries: Vec<(&String, &usize)> =
            counts.iter().filter(|(t, &c)| c >= min_freq && !RESERVED.contains(&t.as_str())).collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.clone()))
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Whitespace token counts, in lexicographic order.
pub fn count_tokens<S: AsRef<str>>(texts: &[S]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for text in texts {
        for tok in text.as_ref().split_whitespace() {
            *counts.entry(tok.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_vocab() {
        let v = Vocab::build(&["a b", "b c"], 1).unwrap();
        assert_eq!(v.len(), 3 + NUM_RESERVED);
        // b is most frequent, then a < c lexicographically
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("c"), 7);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn min_freq_drops_rare_tokens() {
        let v = Vocab::build(&["a b b"], 2).unwrap();
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn empty_input_is_rejected() {
        let none: [&str; 0] = [];
        assert!(Vocab::build(&none, 1).is_err());
    }

    #[test]
    fn json_round_trip_and_decode() {
        let v = Vocab::build(&["x y z x"], 1).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.decode(&v.encode("z x y")), "z x y");
    }
}
