//! Parallel corpora: file IO, tokenization to ids, and batch scheduling.
//!
//! Sentences are stored as content-token ids only; BOS/EOS framing is the
//! model's concern and happens at graph-build time. Batch schedules are
//! index lists so one corpus can back many epochs without copying.

use std::path::Path;

use crate::bpe::BpeModel;
use crate::rng::Rng;
use crate::vocab::Vocab;
use crate::{Error, Result};

/// A pair of token-id sentences (source, target), content tokens only.
pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Tokenizes aligned text through a subword model and vocabulary.
    /// Line counts must match and no line may be empty.
    pub fn from_text<S: AsRef<str>>(
        src_lines: &[S],
        tgt_lines: &[S],
        bpe: &BpeModel,
        vocab: &Vocab,
    ) -> Result<ParallelCorpus> {
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::contract(format!(
                "parallel corpus sides differ: {} source vs {} target lines",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src_lines.len());
        for (i, (s, t)) in src_lines.iter().zip(tgt_lines).enumerate() {
            let s = s.as_ref();
            let t = t.as_ref();
            if s.trim().is_empty() || t.trim().is_empty() {
                return Err(Error::contract(format!(
                    "empty sentence at line {} of parallel corpus",
                    i + 1
                )));
            }
            let src = vocab.encode_all(&bpe.segment_line(s)?);
            let tgt = vocab.encode_all(&bpe.segment_line(t)?);
            pairs.push((src, tgt));
        }
        Ok(ParallelCorpus { pairs })
    }

    /// Swaps the two sides; the backward model trains on this view.
    pub fn flipped(&self) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|(s, t)| (t.clone(), s.clone()))
                .collect(),
        }
    }
}

/// Shuffled epoch schedule: a permutation of `0..n` cut into chunks of
/// `batch_size`, final partial batch kept. 10 items at size 3 give batches
/// of 3, 3, 3, 1.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Reads a line file, distinguishing "not there" from other IO failures so
/// the caller can exit with the missing-artifact code.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Writes lines with trailing newline, creating parent directories.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
