//! Tokenisation and vocabulary construction.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercases, turns every non-alphanumeric character into a space and
/// splits on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bidirectional token/id mapping. Ids `0..4` are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps tokens whose corpus frequency is strictly greater than
    /// `min_count`, ordered by descending frequency then token text.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c > min_count && !SPECIAL_TOKENS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(kept.into_iter().map(|(t, _)| t.to_owned()))
    }

    /// Specials followed by `words` in the given order. Duplicates and
    /// special spellings are dropped.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            if !ids.contains_key(&w) {
                ids.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: the specials are always present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens.get(id as usize).map(String::as_str).ok_or(Error::Vocabulary {
            id: id as usize,
            size: self.tokens.len(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// `BOS w₁ … wₙ EOS`, truncated so the whole sequence fits `max_len`.
    pub fn encode(&self, sentence: &str, max_len: usize) -> TokenSeq {
        let mut ids = vec![BOS];
        ids.extend(tokenize(sentence).iter().map(|t| self.id(t)));
        ids.truncate(max_len.saturating_sub(1).max(1));
        ids.push(EOS);
        TokenSeq(ids)
    }

    /// Space-joined words, skipping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i as usize >= NUM_SPECIALS)
            .filter_map(|&i| self.tokens.get(i as usize))
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 of the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Sequence of vocabulary ids, `BOS … EOS` when complete.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.0.first() == Some(&BOS) && self.0.last() == Some(&EOS)
    }

    /// Teacher-forcing pair: decoder input (all but the last id) and the
    /// next-token targets (all but BOS).
    pub fn shifted(&self) -> (Vec<u32>, Vec<u32>) {
        let n = self.0.len();
        (self.0[..n - 1].to_vec(), self.0[1..].to_vec())
    }
}
