use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SENTINELS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word <-> index map with reserved sentinel indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in SENTINELS {
            v.add(s);
        }
        v
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    /// Sentinels followed by every distinct word of `captions` in sorted order.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut words: Vec<&str> = captions
            .into_iter()
            .flat_map(|c| c.iter().map(String::as_str))
            .collect();
        words.sort_unstable();
        words.dedup();
        let mut v = Vocabulary::new();
        for w in words {
            v.add(w);
        }
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// `BOS w_1 .. w_n EOS`, keeping at most `max_words` words.
    pub fn encode(&self, words: &[String], max_words: usize) -> TokenSequence {
        let mut ids = Vec::with_capacity(words.len().min(max_words) + 2);
        ids.push(BOS);
        ids.extend(words.iter().take(max_words).map(|w| self.index_of(w)));
        ids.push(EOS);
        TokenSequence(ids)
    }

    /// Words of a sequence with sentinels stripped.
    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.words()
            .iter()
            .map(|&i| self.token(i).unwrap_or(SENTINELS[UNK]).to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SENTINELS.len() || tokens[..SENTINELS.len()] != SENTINELS {
            return Err(Error::Validation(
                "vocabulary does not start with the sentinel tokens".into(),
            ));
        }
        let mut v = Vocabulary::new();
        for t in &tokens[SENTINELS.len()..] {
            if v.index.contains_key(*t) {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
            v.add(t);
        }
        Ok(v)
    }
}

/// Caption as vocabulary indices, `BOS .. EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        if n < 2 || indices[0] != BOS || indices[n - 1] != EOS {
            return Err(Error::contract(
                "token sequence must start with BOS and end with EOS",
            ));
        }
        if indices[1..n - 1]
            .iter()
            .any(|&t| t == BOS || t == EOS || t == PAD)
        {
            return Err(Error::contract("sentinel inside token sequence"));
        }
        Ok(TokenSequence(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn words(&self) -> &[usize] {
        &self.0[1..self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
