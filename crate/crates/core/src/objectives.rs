//! Training objectives: per-token negative log-likelihood, minimum-risk
//! over sampled candidates, and the signed combination that pits the two
//! translation directions against each other.
//!
//! The minimum-risk objective weights each sampled candidate by a
//! sharpened distribution Q built from the candidates' sequence
//! log-probabilities, and scores it with a constant Δ = −metric(candidate,
//! reference). Gradients flow through Q only — the metric is treated as a
//! black box — which is what makes discrete quality scores usable as a
//! differentiable training signal.

use serde::{Deserialize, Serialize};

use crate::decode::Candidate;
use crate::metrics::metric_by_name;
use crate::tape::{NodeId, Session};
use crate::tensor::{self, Tensor};
use crate::transformer::Seq2Seq;
use crate::{Error, Result};

/// Which per-pair loss the combined objective uses for each direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Nll,
    Mrt,
}

/// Configuration of the combined two-direction loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualLossConfig {
    /// Weight of the forward-direction term; the combination is
    /// `-lambda * L1 + (1 - lambda) * L2`.
    pub lambda: f64,
    /// Sharpness of the candidate weighting (minimum-risk only).
    pub alpha: f64,
    pub objective: Objective,
    /// Metric registry key scoring candidates (minimum-risk only).
    pub metric: Option<String>,
    /// Candidates sampled per sentence (minimum-risk only).
    pub k: usize,
}

impl Default for DualLossConfig {
    fn default() -> DualLossConfig {
        DualLossConfig {
            lambda: 0.8,
            alpha: 5e-3,
            objective: Objective::Mrt,
            metric: Some("bleu".to_string()),
            k: 16,
        }
    }
}

impl DualLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::contract(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::contract(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.objective == Objective::Mrt {
            let key = self
                .metric
                .as_deref()
                .ok_or_else(|| Error::contract("minimum-risk objective requires a metric key"))?;
            metric_by_name(key)?;
            if self.k == 0 {
                return Err(Error::contract("minimum-risk objective requires k >= 1"));
            }
        }
        Ok(())
    }
}

/// Sharpened candidate weighting: `Q_i = exp(alpha * lp_i) / sum_j
/// exp(alpha * lp_j)`, computed stably in log space.
pub fn q_distribution(logprobs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if logprobs.is_empty() {
        return Err(Error::contract("q_distribution of no candidates"));
    }
    if !(alpha > 0.0) {
        return Err(Error::contract(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if let Some(bad) = logprobs.iter().find(|&&lp| lp > 1e-9 || !lp.is_finite()) {
        return Err(Error::contract(format!(
            "log-probabilities must be finite and <= 0, got {bad}"
        )));
    }
    let scaled: Vec<f64> = logprobs.iter().map(|lp| alpha * lp).collect();
    tensor::softmax(&scaled)
}

/// Expected negative metric over candidates, differentiable through the
/// candidate log-probability nodes: `risk = sum_i Q_i * (-metric_i)`.
///
/// Each entry of `logprob_nodes` must be a live scalar node (the sequence
/// log-probability of one deduplicated candidate); `metric_scores` are
/// plain constants in [0, 1] and contribute no gradient.
pub fn mrt_risk(
    sess: &mut Session,
    logprob_nodes: &[NodeId],
    metric_scores: &[f64],
    alpha: f64,
) -> Result<NodeId> {
    if logprob_nodes.is_empty() {
        return Err(Error::contract("mrt_risk of no candidates"));
    }
    if logprob_nodes.len() != metric_scores.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} metric scores",
            logprob_nodes.len(),
            metric_scores.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::contract(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    for &node in logprob_nodes {
        if sess.value(node).len() != 1 {
            return Err(Error::contract(
                "candidate log-probabilities must be scalar nodes",
            ));
        }
    }
    if let Some(bad) = metric_scores
        .iter()
        .find(|&&m| !(0.0..=1.0).contains(&m))
    {
        return Err(Error::contract(format!(
            "metric scores must lie in [0, 1], got {bad}"
        )));
    }
    let stacked = sess.stack(logprob_nodes);
    let sharpened = sess.scale(stacked, alpha);
    let q = sess.softmax_rows(sharpened);
    let deltas: Vec<f64> = metric_scores.iter().map(|m| -m).collect();
    let deltas = sess.input(Tensor::vector(deltas));
    let weighted = sess.mul(q, deltas);
    Ok(sess.sum(weighted))
}

/// Builds the minimum-risk loss of one sentence from already-sampled
/// candidates: recomputes each candidate's log-probability on the tape
/// (reusing one encoding) so gradients flow, then weights by `scores`.
pub fn mrt_risk_for_candidates(
    sess: &mut Session,
    model: &Seq2Seq,
    enc_out: NodeId,
    candidates: &[Candidate],
    scores: &[f64],
    alpha: f64,
) -> Result<NodeId> {
    let mut lps = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (lp, _) = model.sentence_logprob_with_enc(sess, enc_out, &c.tokens)?;
        lps.push(lp);
    }
    mrt_risk(sess, &lps, scores, alpha)
}

/// Batch negative log-likelihood: the mean over sentences of the
/// per-token NLL `-log P(tgt | src) / |tgt framing|`.
pub fn nll_loss(
    sess: &mut Session,
    model: &Seq2Seq,
    pairs: &[(Vec<usize>, Vec<usize>)],
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::contract("nll_loss of an empty batch"));
    }
    let mut per_sentence = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let (lp, n) = model.sentence_logprob(sess, src, tgt)?;
        per_sentence.push(sess.scale(lp, -1.0 / n as f64));
    }
    let stacked = sess.stack(&per_sentence);
    let total = sess.sum(stacked);
    Ok(sess.scale(total, 1.0 / pairs.len() as f64))
}

/// Signed combination of the two direction losses:
/// `-lambda * l1 + (1 - lambda) * l2`. Minimizing it drives `l1` up
/// (degrading the first direction) while driving `l2` down.
pub fn dual_loss(sess: &mut Session, l1: NodeId, l2: NodeId, lambda: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if sess.value(l1).len() != 1 || sess.value(l2).len() != 1 {
        return Err(Error::contract("dual_loss expects scalar loss nodes"));
    }
    let a = sess.scale(l1, -lambda);
    let b = sess.scale(l2, 1.0 - lambda);
    Ok(sess.add(a, b))
}
