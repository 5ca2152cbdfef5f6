//! Token vocabulary with fixed special ids.
//!
//! The four specials always occupy ids 0..=3 in the order PAD, BOS, EOS,
//! UNK; content tokens follow, ordered by descending corpus frequency with
//! lexicographic tie-breaking, so identical corpora produce identical id
//! assignments on every platform.

use std::collections::HashMap;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

const SPECIALS: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from a token stream. `max_size`, when given,
    /// caps the total size including the four specials.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I, max_size: Option<usize>) -> Vocab {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *freq.entry(t).or_insert(0) += 1;
        }
        for s in SPECIALS {
            freq.remove(s);
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let budget = max_size
            .map(|m| m.saturating_sub(tokens.len()))
            .unwrap_or(usize::MAX);
        tokens.extend(ranked.into_iter().take(budget).map(|(t, _)| t.to_string()));
        Vocab::from_tokens(tokens).expect("specials are well-formed by construction")
    }

    /// Restores a vocabulary from an explicit id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::contract("vocabulary lacks the special tokens"));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::contract(format!(
                    "special token {s:?} must sit at id {i}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    /// Token -> id, mapping unknown tokens to [`UNK`].
    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode_all(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::contract(format!("token id {id} out of vocabulary")))
    }

    pub fn decode_all(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.decode(i).map(|s| s.to_string()))
            .collect()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Ids eligible as replacement candidates: every non-special token.
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.tokens.len()
    }

    /// One token per line, in id order.
    pub fn to_lines(&self) -> String {
        let mut s = String::with_capacity(self.tokens.iter().map(|t| t.len() + 1).sum());
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<Vocab> {
        Vocab::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }
}
