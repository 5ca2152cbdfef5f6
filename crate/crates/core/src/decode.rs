//! Greedy decoding, multinomial candidate sampling, and exact sequence
//! log-probabilities.
//!
//! Decoding runs on an incremental value-level engine with per-layer key/
//! value caches: the source is encoded once and each step costs one decoder
//! row. The engine reproduces the training tape's arithmetic exactly — same
//! kernels, same summation order — so a log-probability accumulated while
//! sampling equals the tape's recomputation to well below 1e-9, which the
//! minimum-risk weighting downstream depends on.
//!
//! Generation never proposes PAD or BOS (their logits are masked out of the
//! *draw*), but recorded log-probabilities always come from the full
//! unmasked softmax so they are true model probabilities.

use crate::rng::Rng;
use crate::tape::{Session, LN_EPS};
use crate::tensor::{self, Tensor};
use crate::transformer::{frame_source, AttnParams, FfnParams, NormParams, Seq2Seq};
use crate::vocab::{BOS, EOS, PAD};
use crate::{Error, Result};

/// Encodes framed source ids to value-level states by running the tape
/// encoder once and extracting the result.
pub fn encode_values(model: &Seq2Seq, src_content: &[usize]) -> Result<Tensor> {
    let mut sess = Session::new();
    let enc = model.encode(&mut sess, &frame_source(src_content))?;
    Ok(sess.value(enc).clone())
}

/// `out[j] = sum_p x[p] * w[p, j]`, accumulated in the same order as the
/// tape's matmul kernel.
fn row_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        let wrow = &w.data[p * cols..(p + 1) * cols];
        for (o, &wpj) in out.iter_mut().zip(wrow) {
            *o += xp * wpj;
        }
    }
    out
}

fn ln_row(x: &[f64], norm: &NormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let g = norm.gain.value();
    let b = norm.bias.value();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv_std * g.data[j] + b.data[j])
        .collect()
}

/// Multi-head attention of one query row against cached keys/values
/// (flattened `[t, d]` rows), mirroring the tape's per-head arithmetic.
fn attend_row(
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    n_heads: usize,
    d_model: usize,
) -> Vec<f64> {
    let t = keys.len() / d_model;
    let dk = d_model / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = vec![0.0; d_model];
    for h in 0..n_heads {
        let qh = &query[h * dk..(h + 1) * dk];
        let mut scores = Vec::with_capacity(t);
        for s in 0..t {
            let kh = &keys[s * d_model + h * dk..s * d_model + (h + 1) * dk];
            scores.push(tensor::dot(qh, kh) * scale);
        }
        let probs = tensor::softmax(&scores).expect("attention scores are finite");
        let out = &mut ctx[h * dk..(h + 1) * dk];
        for (s, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let vh = &values[s * d_model + h * dk..s * d_model + (h + 1) * dk];
            for (o, &vj) in out.iter_mut().zip(vh) {
                *o += p * vj;
            }
        }
    }
    ctx
}

fn attn_block_row(
    params: &AttnParams,
    x_normed: &[f64],
    keys: &[f64],
    values: &[f64],
    n_heads: usize,
    d_model: usize,
) -> Vec<f64> {
    let q = row_matmul(x_normed, &params.wq.value());
    let ctx = attend_row(&q, keys, values, n_heads, d_model);
    row_matmul(&ctx, &params.wo.value())
}

fn ffn_row(params: &FfnParams, x_normed: &[f64]) -> Vec<f64> {
    let b1 = params.b1.value();
    let mut h = row_matmul(x_normed, &params.w1.value());
    for (hj, bj) in h.iter_mut().zip(&b1.data) {
        *hj = (*hj + bj).max(0.0);
    }
    let b2 = params.b2.value();
    let mut out = row_matmul(&h, &params.w2.value());
    for (oj, bj) in out.iter_mut().zip(&b2.data) {
        *oj += bj;
    }
    out
}

/// Step-by-step decoder with cached self-attention keys/values and
/// precomputed cross-attention projections of the encoder output.
pub struct IncrementalDecoder<'m> {
    model: &'m Seq2Seq,
    /// Per layer: projected encoder keys and values, `[S, d]`.
    cross_kv: Vec<(Tensor, Tensor)>,
    /// Per layer: flattened key/value rows of past decoder positions.
    self_kv: Vec<(Vec<f64>, Vec<f64>)>,
    step: usize,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m Seq2Seq, enc_out: &Tensor) -> IncrementalDecoder<'m> {
        let cross_kv = model
            .dec_layers
            .iter()
            .map(|layer| {
                let k = tensor::matmul(enc_out, &layer.cross_attn.wk.value());
                let v = tensor::matmul(enc_out, &layer.cross_attn.wv.value());
                (k, v)
            })
            .collect();
        let self_kv = model
            .dec_layers
            .iter()
            .map(|_| (Vec::new(), Vec::new()))
            .collect();
        IncrementalDecoder {
            model,
            cross_kv,
            self_kv,
            step: 0,
        }
    }

    /// Feeds the next decoder input token (BOS first) and returns the
    /// unmasked logits row for the following position.
    pub fn step(&mut self, input_token: usize) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        if input_token >= cfg.vocab_size {
            return Err(Error::contract(format!(
                "token id {input_token} out of vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        if self.step + 1 > cfg.max_len {
            return Err(Error::contract(format!(
                "decode length {} exceeds max_len {}",
                self.step + 1,
                cfg.max_len
            )));
        }

        let embed = self.model.dec_embed.value();
        let scale = (d as f64).sqrt();
        let pos = self.model.positions.row(self.step);
        let mut x: Vec<f64> = embed.row(input_token)
            .iter()
            .zip(pos)
            .map(|(e, p)| e * scale + p)
            .collect();
        drop(embed);

        for (l, layer) in self.model.dec_layers.iter().enumerate() {
            // Causal self-attention over cached rows plus this one.
            let normed = ln_row(&x, &layer.ln_self);
            let k_new = row_matmul(&normed, &layer.self_attn.wk.value());
            let v_new = row_matmul(&normed, &layer.self_attn.wv.value());
            let (keys, values) = &mut self.self_kv[l];
            keys.extend_from_slice(&k_new);
            values.extend_from_slice(&v_new);
            let att = attn_block_row(&layer.self_attn, &normed, keys, values, h, d);
            for (xi, ai) in x.iter_mut().zip(&att) {
                *xi += ai;
            }

            // Cross-attention against the precomputed encoder projections.
            let normed = ln_row(&x, &layer.ln_cross);
            let (ck, cv) = &self.cross_kv[l];
            let att = attn_block_row(&layer.cross_attn, &normed, &ck.data, &cv.data, h, d);
            for (xi, ai) in x.iter_mut().zip(&att) {
                *xi += ai;
            }

            let normed = ln_row(&x, &layer.ln_ffn);
            let ff = ffn_row(&layer.ffn, &normed);
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi += fi;
            }
        }

        let x = ln_row(&x, &self.model.dec_norm);
        let w = self.model.out_proj.value();
        let logits = (0..cfg.vocab_size)
            .map(|v| tensor::dot(&x, w.row(v)))
            .collect();
        self.step += 1;
        Ok(logits)
    }
}

/// Disallows PAD and BOS as generated tokens.
fn mask_for_generation(logits: &mut [f64]) {
    logits[PAD] = f64::NEG_INFINITY;
    logits[BOS] = f64::NEG_INFINITY;
}

fn argmax_lowest_tie(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy translation of content token ids, argmax per step with ties
/// resolved toward the lowest id. Stops at EOS or after `max_content_len`
/// tokens. The result never contains specials.
pub fn greedy_decode(
    model: &Seq2Seq,
    src_content: &[usize],
    max_content_len: usize,
) -> Result<Vec<usize>> {
    let enc = encode_values(model, src_content)?;
    let mut dec = IncrementalDecoder::new(model, &enc);
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < max_content_len {
        let mut logits = dec.step(prev)?;
        mask_for_generation(&mut logits);
        let tok = argmax_lowest_tie(&logits);
        if tok == EOS {
            break;
        }
        out.push(tok);
        prev = tok;
    }
    Ok(out)
}

/// One sampled candidate translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Content token ids (no BOS/EOS framing).
    pub tokens: Vec<usize>,
    /// Full-softmax log-probability of the framed sequence, accumulated
    /// during sampling.
    pub logprob: f64,
    /// How many of the K draws produced this sequence.
    pub draws: u32,
}

/// K multinomial draws, deduplicated in first-seen order.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub candidates: Vec<Candidate>,
    pub k_requested: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Draws `k` candidate translations by ancestral sampling. Each step draws
/// from the softmax restricted to non-PAD/BOS tokens; sequences still open
/// at `max_content_len` are closed and their log-probability includes the
/// forced EOS factor, so every stored value is the true model
/// log-probability of the framed candidate.
pub fn sample_k(
    model: &Seq2Seq,
    src_content: &[usize],
    k: usize,
    max_content_len: usize,
    rng: &mut Rng,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::contract("sample_k requires k >= 1"));
    }
    let enc = encode_values(model, src_content)?;
    let mut set = SampleSet {
        candidates: Vec::new(),
        k_requested: k,
    };
    for _ in 0..k {
        let mut dec = IncrementalDecoder::new(model, &enc);
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        let mut prev = BOS;
        loop {
            let logits = dec.step(prev)?;
            let full_lp = tensor::log_softmax(&logits)?;
            if tokens.len() == max_content_len {
                logprob += full_lp[EOS]; // forced close
                break;
            }
            let mut masked = logits.clone();
            mask_for_generation(&mut masked);
            let probs = tensor::softmax(&masked)?;
            let tok = rng.categorical(&probs);
            logprob += full_lp[tok];
            if tok == EOS {
                break;
            }
            tokens.push(tok);
            prev = tok;
        }
        match set.candidates.iter_mut().find(|c| c.tokens == tokens) {
            Some(c) => c.draws += 1,
            None => set.candidates.push(Candidate {
                tokens,
                logprob,
                draws: 1,
            }),
        }
    }
    Ok(set)
}

/// Exact log-probability of `tgt_content` given `src_content` under the
/// model, via the training tape (the canonical definition).
pub fn log_prob(model: &Seq2Seq, src_content: &[usize], tgt_content: &[usize]) -> Result<f64> {
    let mut sess = Session::new();
    let (lp, _) = model.sentence_logprob(&mut sess, src_content, tgt_content)?;
    Ok(sess.scalar(lp))
}
