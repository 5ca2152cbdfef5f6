//! Token-level perturbation: adversarial sample generation from an
//! embedding pair, and synthetic noise for robustness test sets.
//!
//! Both generators share one per-token decision scheme — keep, replace, or
//! delete — and one replacement rule: the candidate whose *original*
//! embedding row is most cosine-similar to the perturbed token's *query*
//! row. Adversarial generation queries with the attacked matrix (tokens
//! move toward whatever the attack made them mean), while synthetic noise
//! queries with the original matrix (tokens move to their ordinary nearest
//! neighbor). Special tokens are never touched, and a sentence is never
//! emptied: if every content token would be deleted, the final deletion is
//! cancelled.

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::rng::Rng;
use crate::tensor::{dot, Tensor};
use crate::vocab::UNK;
use crate::{Error, Result};

/// Ids that are never perturbed and never offered as replacements.
const PROTECTED: [usize; 3] = [crate::vocab::PAD, crate::vocab::BOS, crate::vocab::EOS];

/// Per-token action probabilities: keep with `p_np`; otherwise replace
/// with `p_rp` or delete with `p_rd` (conditional on perturbing).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPolicy {
    pub p_np: f64,
    pub p_rp: f64,
    pub p_rd: f64,
}

impl Default for PerturbationPolicy {
    fn default() -> PerturbationPolicy {
        PerturbationPolicy {
            p_np: 0.7,
            p_rp: 0.8,
            p_rd: 0.2,
        }
    }
}

impl PerturbationPolicy {
    /// Policy perturbing `percent`% of content tokens, with the default
    /// replacement/deletion split.
    pub fn with_adv_percent(percent: f64) -> PerturbationPolicy {
        PerturbationPolicy {
            p_np: 1.0 - percent / 100.0,
            ..PerturbationPolicy::default()
        }
    }

    /// The percentage of content tokens this policy perturbs.
    pub fn adv_percent(&self) -> f64 {
        100.0 * (1.0 - self.p_np)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_np", self.p_np), ("p_rp", self.p_rp), ("p_rd", self.p_rd)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if (self.p_rp + self.p_rd - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!(
                "p_rp + p_rd must equal 1, got {}",
                self.p_rp + self.p_rd
            )));
        }
        Ok(())
    }
}

/// Synthetic noise family: pure deletion or pure replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    Rd,
    Rp,
}

impl NoiseType {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseType::Rd => "rd",
            NoiseType::Rp => "rp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub noise_type: NoiseType,
    pub ratio: f64,
}

impl NoiseSpec {
    pub fn new(noise_type: NoiseType, ratio: f64) -> Result<NoiseSpec> {
        let spec = NoiseSpec { noise_type, ratio };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::contract(format!(
                "noise ratio must lie in (0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Source-side file name for a noisy test set, e.g. `test.rd15.src`.
pub fn noisy_file_name(base: &str, spec: &NoiseSpec) -> String {
    format!(
        "{base}.{}{:02}.src",
        spec.noise_type.as_str(),
        (spec.ratio * 100.0).round() as u32
    )
}

/// An original/attacked embedding snapshot with cached row norms, ready
/// for nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct EmbeddingPair {
    pub original: Tensor,
    pub attacked: Tensor,
    original_norms: Vec<f64>,
    attacked_norms: Vec<f64>,
}

fn row_norms(m: &Tensor) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), m.row(i)).sqrt()).collect()
}

impl EmbeddingPair {
    pub fn new(original: Tensor, attacked: Tensor) -> Result<EmbeddingPair> {
        if original.shape != attacked.shape {
            return Err(Error::contract(format!(
                "embedding shapes differ: {:?} vs {:?}",
                original.shape, attacked.shape
            )));
        }
        if original.shape.len() != 2 {
            return Err(Error::contract("embeddings must be matrices"));
        }
        let original_norms = row_norms(&original);
        let attacked_norms = row_norms(&attacked);
        for (which, norms) in [("original", &original_norms), ("attacked", &attacked_norms)] {
            for (id, &n) in norms.iter().enumerate().skip(UNK) {
                if n == 0.0 {
                    return Err(Error::contract(format!(
                        "{which} embedding row {id} has zero norm; perturbable \
                         tokens need a direction"
                    )));
                }
            }
        }
        Ok(EmbeddingPair {
            original,
            attacked,
            original_norms,
            attacked_norms,
        })
    }

    /// A pair whose query and key sides are the same matrix (the
    /// synthetic-noise degenerate case).
    pub fn identical(e: Tensor) -> Result<EmbeddingPair> {
        EmbeddingPair::new(e.clone(), e)
    }

    pub fn vocab_size(&self) -> usize {
        self.original.rows()
    }

    /// Nearest replacement for `token`: queries with the attacked row and
    /// ranks candidates by their original rows.
    pub fn replacement(&self, token: usize, exclusions: &[usize]) -> Result<usize> {
        nn_with_norms(
            token,
            &self.attacked,
            &self.attacked_norms,
            &self.original,
            &self.original_norms,
            exclusions,
        )
    }
}

/// Most-cosine-similar candidate: `argmax over v not excluded (and not the
/// token itself) of cos(E_query[token], E_key[v])`, ties broken toward the
/// lowest id.
pub fn nearest_neighbor(
    token: usize,
    e_query: &Tensor,
    e_key: &Tensor,
    exclusions: &[usize],
) -> Result<usize> {
    if e_query.shape != e_key.shape {
        return Err(Error::contract(format!(
            "embedding shapes differ: {:?} vs {:?}",
            e_query.shape, e_key.shape
        )));
    }
    nn_with_norms(
        token,
        e_query,
        &row_norms(e_query),
        e_key,
        &row_norms(e_key),
        exclusions,
    )
}

fn nn_with_norms(
    token: usize,
    e_query: &Tensor,
    query_norms: &[f64],
    e_key: &Tensor,
    key_norms: &[f64],
    exclusions: &[usize],
) -> Result<usize> {
    let v = e_key.rows();
    if token >= v {
        return Err(Error::contract(format!(
            "token {token} out of embedding range {v}"
        )));
    }
    if exclusions.contains(&token) {
        return Err(Error::contract(format!(
            "query token {token} is itself excluded"
        )));
    }
    let qn = query_norms[token];
    if qn == 0.0 {
        return Err(Error::contract(format!(
            "query row {token} has zero norm; cosine is undefined"
        )));
    }
    let q = e_query.row(token);
    let mut best: Option<(usize, f64)> = None;
    for cand in 0..v {
        if cand == token || exclusions.contains(&cand) {
            continue;
        }
        let kn = key_norms[cand];
        // A direction-free candidate can never be anything's neighbor.
        let cos = if kn == 0.0 {
            f64::NEG_INFINITY
        } else {
            dot(q, e_key.row(cand)) / (qn * kn)
        };
        match best {
            Some((_, b)) if cos <= b => {}
            _ => best = Some((cand, cos)),
        }
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::contract("every candidate token is excluded"))
}

/// Applies the keep/replace/delete scheme to one sentence of content token
/// ids. Protected specials pass through untouched; the result is never
/// empty (a deletion that would empty it is cancelled).
pub fn adversarialize(
    sentence: &[usize],
    policy: &PerturbationPolicy,
    pair: &EmbeddingPair,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    policy.validate()?;
    let mut out = Vec::with_capacity(sentence.len());
    let mut last_deleted: Option<(usize, usize)> = None; // (output position, token)
    let mut content_seen = false;
    for &tok in sentence {
        if PROTECTED.contains(&tok) {
            out.push(tok);
            continue;
        }
        content_seen = true;
        if !rng.bernoulli(1.0 - policy.p_np) {
            out.push(tok);
            continue;
        }
        // Perturb: one more draw picks the action, taken even for the
        // degenerate 0/1 splits so decision streams stay aligned across
        // generators.
        if rng.bernoulli(policy.p_rp) {
            out.push(pair.replacement(tok, &PROTECTED)?);
        } else {
            last_deleted = Some((out.len(), tok));
        }
    }
    let content_left = out.iter().any(|t| !PROTECTED.contains(t));
    if content_seen && !content_left {
        let (pos, tok) = last_deleted.expect("emptied sentence implies a deletion");
        out.insert(pos, tok);
    }
    Ok(out)
}

/// Perturbs every source sentence of `corpus` with probability `ratio` per
/// content token — deletion for RD, same-matrix nearest-neighbor
/// replacement for RP. Targets pass through untouched. Each sentence draws
/// from its own substream, so the output is independent of traversal or
/// worker order.
pub fn make_noisy_testset(
    corpus: &ParallelCorpus,
    spec: &NoiseSpec,
    embedding: &Tensor,
    rng: &Rng,
) -> Result<ParallelCorpus> {
    spec.validate()?;
    let pair = EmbeddingPair::identical(embedding.clone())?;
    let policy = PerturbationPolicy {
        p_np: 1.0 - spec.ratio,
        p_rp: match spec.noise_type {
            NoiseType::Rp => 1.0,
            NoiseType::Rd => 0.0,
        },
        p_rd: match spec.noise_type {
            NoiseType::Rp => 0.0,
            NoiseType::Rd => 1.0,
        },
    };
    let mut pairs = Vec::with_capacity(corpus.len());
    for (i, (src, tgt)) in corpus.pairs.iter().enumerate() {
        let mut sentence_rng = rng.substream_indexed("noise.sentence", i as u64);
        let noisy = adversarialize(src, &policy, &pair, &mut sentence_rng)?;
        pairs.push((noisy, tgt.clone()));
    }
    Ok(ParallelCorpus { pairs })
}
