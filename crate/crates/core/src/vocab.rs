//! Whitespace tokenizer over a closed vocabulary.
//!
//! The synthetic worlds use a controlled token set, so splitting on
//! whitespace is lossless.  Unknown words map to UNK rather than erroring:
//! probe questions may mention entities the model has never seen.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from any iterator of words.  Input order does not matter: words
    /// are deduplicated and sorted, so the id assignment is reproducible.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut uniq: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !w.is_empty() && !RESERVED.contains(&w.as_str()))
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(uniq);
        let mut v = Vocab { tokens, index: HashMap::new() };
        v.rebuild_index();
        v
    }

    /// Rebuild from a stored token list, trusting its order.  Ids are
    /// positional, so a checkpoint must round-trip the exact sequence;
    /// re-sorting here would silently remap every id.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()].iter().map(String::as_str).ne(RESERVED)
        {
            return Err(Error::Format("vocabulary lacks the reserved prefix".into()));
        }
        let mut v = Vocab { tokens, index: HashMap::new() };
        v.rebuild_index();
        if v.index.len() != v.tokens.len() {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Restore after deserialization (the reverse map is not stored).
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Index(format!("token id {} out of range ({})", id, self.len())))
    }

    /// Whitespace-split `text`; unknown words become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Render ids back to a space-joined string, dropping structural tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.tokens.get(id).map(|s| s.as_str()).unwrap_or("<unk>"))
            .collect();
        words.join(" ")
    }
}
