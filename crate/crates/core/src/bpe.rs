//! Byte-pair-encoding subword segmentation.
//!
//! Merges are learned greedily on word frequencies: each round merges the
//! adjacent symbol pair with the highest corpus count, breaking ties toward
//! the lexicographically smallest pair so learning is order-deterministic.
//! Segmentation itself is marker-free; the word-end marker `·` is attached
//! to the final subword of each word only when a whole line is rendered to
//! tokens, which keeps pair statistics clean and makes desegmentation a
//! simple scan.

use std::collections::HashMap;

use crate::{Error, Result};

/// Marker glued onto the last subword of every word.
pub const WORD_END: char = '·';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

fn words_of(line: &str) -> impl Iterator<Item = &str> {
    line.split_whitespace()
}

fn check_reserved(text: &str) -> Result<()> {
    if text.contains(WORD_END) {
        Err(Error::contract(format!(
            "input contains the reserved word-end marker {WORD_END:?}"
        )))
    } else {
        Ok(())
    }
}

impl BpeModel {
    /// Learns up to `num_merges` merge rules from whitespace-tokenized lines.
    /// Stops early once every word is a single symbol.
    pub fn learn<S: AsRef<str>>(lines: &[S], num_merges: usize) -> Result<BpeModel> {
        let mut word_freq: HashMap<Vec<String>, u64> = HashMap::new();
        for line in lines {
            check_reserved(line.as_ref())?;
            for w in words_of(line.as_ref()) {
                let symbols: Vec<String> = w.chars().map(String::from).collect();
                *word_freq.entry(symbols).or_insert(0) += 1;
            }
        }

        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pair_freq: HashMap<(&str, &str), u64> = HashMap::new();
            for (word, freq) in &word_freq {
                for pair in word.windows(2) {
                    *pair_freq.entry((&pair[0], &pair[1])).or_insert(0) += freq;
                }
            }
            // Highest count wins; ties fall to the lexicographically
            // smallest pair so the rule list never depends on map order.
            let best = pair_freq
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let ((left, right), _) = match best {
                Some(b) => b,
                None => break,
            };
            let rule = (left.to_string(), right.to_string());

            let mut next = HashMap::with_capacity(word_freq.len());
            for (word, freq) in &word_freq {
                let merged = merge_word(word, &rule.0, &rule.1);
                *next.entry(merged).or_insert(0) += freq;
            }
            word_freq = next;
            merges.push(rule);
        }
        Ok(BpeModel { merges })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Splits one word into subwords (no word-end marker).
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        if symbols.len() < 2 {
            return symbols;
        }
        let rank: HashMap<(&str, &str), usize> = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| ((l.as_str(), r.as_str()), i))
            .collect();
        loop {
            // Earliest-learned applicable rule fires first, everywhere.
            let best = symbols
                .windows(2)
                .filter_map(|p| rank.get(&(p[0].as_str(), p[1].as_str())))
                .min()
                .copied();
            let Some(ri) = best else { break };
            let (l, r) = &self.merges[ri];
            symbols = merge_word(&symbols, l, r);
            if symbols.len() < 2 {
                break;
            }
        }
        symbols
    }

    /// Tokenizes a whitespace-split line, attaching [`WORD_END`] to the last
    /// subword of every word.
    pub fn segment_line(&self, line: &str) -> Result<Vec<String>> {
        check_reserved(line)?;
        let mut out = Vec::new();
        for w in words_of(line) {
            let mut parts = self.segment_word(w);
            if let Some(last) = parts.last_mut() {
                last.push(WORD_END);
            }
            out.extend(parts);
        }
        Ok(out)
    }

    /// Serializes as one `left<TAB>right` line per rule, in learned order.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push('\t');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<BpeModel> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once('\t').ok_or_else(|| {
                Error::contract(format!("merge rule line {} lacks a tab separator", i + 1))
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(BpeModel { merges })
    }
}

fn merge_word(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Restores plain text from marker-carrying subword tokens: subwords are
/// concatenated and a marker closes the current word.
pub fn desegment<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for t in tokens {
        let t = t.as_ref();
        if let Some(stripped) = t.strip_suffix(WORD_END) {
            current.push_str(stripped);
            words.push(std::mem::take(&mut current));
        } else {
            current.push_str(t);
        }
    }
    if !current.is_empty() {
        words.push(current); // unterminated trailing word: keep it anyway
    }
    words.join(" ")
}
