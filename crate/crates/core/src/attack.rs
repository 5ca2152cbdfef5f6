//! Gradient attack on the shared source-language embedding.
//!
//! Both translation directions share one embedding matrix. With every other
//! parameter frozen, the attack repeatedly steps that matrix against the
//! combined objective `-lambda * L1 + (1 - lambda) * L2`: the forward
//! model's loss is driven *up* (its translations degrade toward garbage)
//! while the backward model's loss is held *down* (the perturbed embedding
//! still carries enough meaning to translate back). The attacked matrix is
//! returned alongside a bit-exact snapshot of the original so downstream
//! consumers can use the pair as a query/key table for nearest-neighbor
//! token replacement.

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::corpus::ParallelCorpus;
use crate::decode::{greedy_decode, sample_k};
use crate::dual::DualSystem;
use crate::metrics::{metric_by_name, Metric};
use crate::objectives::{dual_loss, mrt_risk_for_candidates, nll_loss, DualLossConfig, Objective};
use crate::rng::Rng;
use crate::tape::Session;
use crate::tensor::Tensor;
use crate::transformer::{frame_source, Seq2Seq};
use crate::{Error, Result};

/// Attack hyper-parameters: the shared loss settings plus the epoch
/// budget, the embedding-specific learning rate, and the convergence
/// window (epochs without improvement of the mean combined loss).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub loss: DualLossConfig,
    pub e_max: usize,
    pub lr: f64,
    pub window: usize,
}

impl Default for AttackConfig {
    fn default() -> AttackConfig {
        AttackConfig {
            loss: DualLossConfig::default(),
            e_max: 20,
            lr: 1e-4,
            window: 3,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.e_max == 0 {
            return Err(Error::contract("attack needs e_max >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One row of the attack trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEpoch {
    pub epoch: usize,
    /// Mean combined loss over the corpus during this epoch.
    pub dual_loss: f64,
    /// Greedy corpus score of the forward direction after the epoch.
    pub forward_score: f64,
    /// Greedy corpus score of the backward direction after the epoch.
    pub backward_score: f64,
}

/// Outcome of an attack: the embedding before and after, plus the
/// per-epoch trace.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub original: Tensor,
    pub attacked: Tensor,
    pub trace: Vec<AttackEpoch>,
}

/// Default rendering of token ids for metric scoring: space-joined
/// decimal ids. Word-level metrics are invariant under any 1:1 renaming
/// of tokens, so this scores identically to rendering real surface forms.
pub fn ids_as_text(ids: &[usize]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Runs the embedding attack with the default id renderer.
pub fn attack_embedding(
    dual: &DualSystem,
    corpus: &ParallelCorpus,
    cfg: &AttackConfig,
    rng: &Rng,
) -> Result<AttackResult> {
    attack_embedding_rendered(dual, corpus, cfg, rng, &ids_as_text)
}

/// Runs the embedding attack, rendering token ids through `render`
/// whenever a sentence metric scores a candidate or a greedy decode.
pub fn attack_embedding_rendered(
    dual: &DualSystem,
    corpus: &ParallelCorpus,
    cfg: &AttackConfig,
    rng: &Rng,
    render: &dyn Fn(&[usize]) -> String,
) -> Result<AttackResult> {
    cfg.validate()?;
    dual.verify_attack_mode()?;
    if corpus.is_empty() {
        return Err(Error::contract("attack on an empty corpus"));
    }
    let metric = match cfg.loss.objective {
        Objective::Mrt => Some(metric_by_name(cfg.loss.metric.as_deref().unwrap_or(""))?),
        Objective::Nll => None,
    };
    // The trace scores with the configured metric when there is one, and
    // with the default word-overlap metric for the likelihood objective.
    let trace_metric = match &metric {
        Some(m) => *m,
        None => metric_by_name("bleu")?,
    };

    let shared = dual.shared_embed();
    let original = shared.value().clone();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let max_content = dual.cfg.max_len - 1;

    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize; // a zero window converges before the first epoch

    for epoch in 1..=cfg.e_max {
        if stale >= cfg.window {
            break;
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng.substream_indexed("attack.order", epoch as u64)
            .shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for &i in &order {
            let (x, y) = &corpus.pairs[i];
            let mut sess = Session::new();
            let (l1, l2) = match cfg.loss.objective {
                Objective::Nll => {
                    let l1 = nll_loss(&mut sess, &dual.forward, &[(x.clone(), y.clone())])?;
                    let l2 = nll_loss(&mut sess, &dual.backward, &[(y.clone(), x.clone())])?;
                    (l1, l2)
                }
                Objective::Mrt => {
                    let m = metric.as_ref().expect("metric resolved for this objective");
                    let key = ((epoch as u64) << 32) | ((i as u64) << 1);
                    let l1 = mrt_pair_loss(
                        &mut sess,
                        &dual.forward,
                        x,
                        y,
                        m,
                        &cfg.loss,
                        max_content,
                        &mut rng.substream_indexed("attack.sample", key),
                        render,
                    )?;
                    let l2 = mrt_pair_loss(
                        &mut sess,
                        &dual.backward,
                        y,
                        x,
                        m,
                        &cfg.loss,
                        max_content,
                        &mut rng.substream_indexed("attack.sample", key | 1),
                        render,
                    )?;
                    (l1, l2)
                }
            };
            let loss = dual_loss(&mut sess, l1, l2, cfg.loss.lambda)?;
            epoch_loss += sess.scalar(loss);
            sess.backward(loss)?;
            opt.step(&sess.param_grads())?;
        }
        epoch_loss /= corpus.len() as f64;

        let (forward_score, backward_score) =
            track_degradation_rendered(dual, corpus, &trace_metric, render)?;
        trace.push(AttackEpoch {
            epoch,
            dual_loss: epoch_loss,
            forward_score,
            backward_score,
        });
        if epoch_loss < best {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
        }
    }

    let attacked = shared.value().clone();
    Ok(AttackResult {
        original,
        attacked,
        trace,
    })
}

/// Minimum-risk loss of one sentence pair under one direction: samples
/// candidates from the current model, scores them against the reference,
/// and builds the differentiable risk.
#[allow(clippy::too_many_arguments)]
fn mrt_pair_loss(
    sess: &mut Session,
    model: &Seq2Seq,
    src: &[usize],
    reference: &[usize],
    metric: &Metric,
    loss_cfg: &DualLossConfig,
    max_content: usize,
    rng: &mut Rng,
    render: &dyn Fn(&[usize]) -> String,
) -> Result<crate::tape::NodeId> {
    let set = sample_k(model, src, loss_cfg.k, max_content, rng)?;
    let ref_text = render(reference);
    let scores: Vec<f64> = set
        .candidates
        .iter()
        .map(|c| (metric.sentence)(&render(&c.tokens), &ref_text))
        .collect();
    let enc = model.encode(sess, &frame_source(src))?;
    mrt_risk_for_candidates(sess, model, enc, &set.candidates, &scores, loss_cfg.alpha)
}

/// Greedy-decodes the corpus in both directions and reports the corpus
/// metric of each: `(forward score, backward score)`.
pub fn track_degradation(
    dual: &DualSystem,
    corpus: &ParallelCorpus,
    metric_key: &str,
) -> Result<(f64, f64)> {
    let metric = metric_by_name(metric_key)?;
    track_degradation_rendered(dual, corpus, &metric, &ids_as_text)
}

pub fn track_degradation_rendered(
    dual: &DualSystem,
    corpus: &ParallelCorpus,
    metric: &Metric,
    render: &dyn Fn(&[usize]) -> String,
) -> Result<(f64, f64)> {
    if corpus.is_empty() {
        return Err(Error::contract("degradation tracking on an empty corpus"));
    }
    let max_content = dual.cfg.max_len - 1;
    let score_direction = |model: &Seq2Seq, flipped: bool| -> Result<f64> {
        let mut hyps = Vec::with_capacity(corpus.len());
        let mut refs = Vec::with_capacity(corpus.len());
        for (x, y) in &corpus.pairs {
            let (src, tgt) = if flipped { (y, x) } else { (x, y) };
            hyps.push(render(&greedy_decode(model, src, max_content)?));
            refs.push(render(tgt));
        }
        (metric.corpus)(&hyps, &refs)
    };
    Ok((
        score_direction(&dual.forward, false)?,
        score_direction(&dual.backward, true)?,
    ))
}

/// Serializes a trace as tab-separated lines, one epoch per line.
pub fn trace_to_lines(trace: &[AttackEpoch]) -> String {
    let mut out = String::from("epoch\tdual_loss\tforward_score\tbackward_score\n");
    for e in trace {
        out.push_str(&format!(
            "{}\t{:.17e}\t{:.17e}\t{:.17e}\n",
            e.epoch, e.dual_loss, e.forward_score, e.backward_score
        ));
    }
    out
}

pub fn trace_from_lines(text: &str) -> Result<Vec<AttackEpoch>> {
    // Leading `#` lines are tolerated so callers can stamp provenance
    // (seed, config) on trace files without breaking the round trip.
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    match lines.next() {
        Some(h) if h == "epoch\tdual_loss\tforward_score\tbackward_score" => {}
        other => {
            return Err(Error::contract(format!(
                "malformed trace header: {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::contract(format!(
                "trace line {} has {} fields, expected 4",
                n + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::contract(format!("bad trace number {s:?} on line {}", n + 2)))
        };
        out.push(AttackEpoch {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::contract(format!("bad epoch {:?} on line {}", fields[0], n + 2)))?,
            dual_loss: parse(fields[1])?,
            forward_score: parse(fields[2])?,
            backward_score: parse(fields[3])?,
        });
    }
    Ok(out)
}
