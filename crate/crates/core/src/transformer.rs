//! A small encoder-decoder transformer over the autodiff tape.
//!
//! Layers are pre-norm (layer norm feeds each sublayer, residuals stay on
//! the raw stream, one final norm per stack), attention is multi-head with
//! per-head column slices of single `[d, d]` projections, and the decoder
//! input embedding doubles as the output projection when tying is enabled.
//! Sentences are processed one at a time — batching happens by accumulating
//! losses across a batch's sentences, which keeps masking trivial at the
//! scale this crate targets.
//!
//! Framing convention: the encoder consumes `content + EOS`, the decoder
//! consumes `BOS + content` and predicts `content + EOS`. Empty content is
//! legal on the target side (the model may predict EOS immediately) but not
//! on the source side.

use serde::{Deserialize, Serialize};

use crate::param::Param;
use crate::rng::Rng;
use crate::tape::{NodeId, Session};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    /// Share the decoder input embedding with the output projection.
    pub tie_decoder_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 128,
            max_len: 64,
            tie_decoder_embed: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::contract(
                "vocab_size must cover the four specials plus content",
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ffn == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::contract("max_len must be at least 2"));
        }
        Ok(())
    }
}

/// One attention block's projections.
pub(crate) struct AttnParams {
    pub(crate) wq: Param,
    pub(crate) wk: Param,
    pub(crate) wv: Param,
    pub(crate) wo: Param,
}

pub(crate) struct FfnParams {
    pub(crate) w1: Param,
    pub(crate) b1: Param,
    pub(crate) w2: Param,
    pub(crate) b2: Param,
}

pub(crate) struct NormParams {
    pub(crate) gain: Param,
    pub(crate) bias: Param,
}

pub(crate) struct EncLayer {
    pub(crate) ln_attn: NormParams,
    pub(crate) attn: AttnParams,
    pub(crate) ln_ffn: NormParams,
    pub(crate) ffn: FfnParams,
}

pub(crate) struct DecLayer {
    pub(crate) ln_self: NormParams,
    pub(crate) self_attn: AttnParams,
    pub(crate) ln_cross: NormParams,
    pub(crate) cross_attn: AttnParams,
    pub(crate) ln_ffn: NormParams,
    pub(crate) ffn: FfnParams,
}

pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub name: String,
    pub enc_embed: Param,
    pub dec_embed: Param,
    /// Aliases `dec_embed` when `cfg.tie_decoder_embed` is set.
    pub out_proj: Param,
    pub(crate) enc_layers: Vec<EncLayer>,
    pub(crate) dec_layers: Vec<DecLayer>,
    pub(crate) enc_norm: NormParams,
    pub(crate) dec_norm: NormParams,
    /// Precomputed sinusoidal position table `[max_len, d_model]`.
    pub(crate) positions: Tensor,
}

/// Pre-existing tensors to share instead of freshly initializing. This is
/// how the backward model adopts the forward model's source embedding.
#[derive(Default)]
pub struct SharedSlots {
    pub enc_embed: Option<Param>,
    pub dec_embed: Option<Param>,
}

fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![max_len, d]);
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            t.data[pos * d + 2 * i] = angle.sin();
            t.data[pos * d + 2 * i + 1] = angle.cos();
        }
        if d % 2 == 1 {
            let freq = 1.0 / 10000f64.powf((d - 1) as f64 / d as f64);
            t.data[pos * d + d - 1] = (pos as f64 * freq).sin();
        }
    }
    t
}

impl Seq2Seq {
    pub fn init(name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Seq2Seq> {
        Seq2Seq::init_shared(name, cfg, rng, SharedSlots::default())
    }

    /// Initializes a model, adopting any tensors supplied in `shared`.
    pub fn init_shared(
        name: &str,
        cfg: &ModelConfig,
        rng: &mut Rng,
        shared: SharedSlots,
    ) -> Result<Seq2Seq> {
        cfg.validate()?;
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ffn);
        let embed_std = 1.0 / (d as f64).sqrt();

        let embed_or = |slot: Option<Param>, role: &str, rng: &mut Rng| -> Result<Param> {
            match slot {
                Some(p) => {
                    if p.value().shape != vec![v, d] {
                        return Err(Error::contract(format!(
                            "shared {role} has shape {:?}, expected [{v}, {d}]",
                            p.value().shape
                        )));
                    }
                    Ok(p)
                }
                None => Ok(Param::new(
                    format!("{name}.{role}"),
                    gaussian(rng, vec![v, d], embed_std),
                )),
            }
        };
        let enc_embed = embed_or(shared.enc_embed, "enc_embed", rng)?;
        let dec_embed = embed_or(shared.dec_embed, "dec_embed", rng)?;
        let out_proj = if cfg.tie_decoder_embed {
            dec_embed.clone()
        } else {
            Param::new(format!("{name}.out_proj"), gaussian(rng, vec![v, d], embed_std))
        };

        let xavier = |rng: &mut Rng, rows: usize, cols: usize, pname: String| -> Param {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            Param::new(pname, gaussian(rng, vec![rows, cols], std))
        };
        let norm = |pname: &str| NormParams {
            gain: Param::new(format!("{pname}.gain"), Tensor::vector(vec![1.0; d])),
            bias: Param::new(format!("{pname}.bias"), Tensor::vector(vec![0.0; d])),
        };
        let attn = |rng: &mut Rng, pname: &str| AttnParams {
            wq: xavier(rng, d, d, format!("{pname}.wq")),
            wk: xavier(rng, d, d, format!("{pname}.wk")),
            wv: xavier(rng, d, d, format!("{pname}.wv")),
            wo: xavier(rng, d, d, format!("{pname}.wo")),
        };
        let ffn = |rng: &mut Rng, pname: &str| FfnParams {
            w1: xavier(rng, d, f, format!("{pname}.w1")),
            b1: Param::new(format!("{pname}.b1"), Tensor::vector(vec![0.0; f])),
            w2: xavier(rng, f, d, format!("{pname}.w2")),
            b2: Param::new(format!("{pname}.b2"), Tensor::vector(vec![0.0; d])),
        };

        let enc_layers = (0..cfg.n_layers)
            .map(|l| EncLayer {
                ln_attn: norm(&format!("{name}.enc.l{l}.ln_attn")),
                attn: attn(rng, &format!("{name}.enc.l{l}.attn")),
                ln_ffn: norm(&format!("{name}.enc.l{l}.ln_ffn")),
                ffn: ffn(rng, &format!("{name}.enc.l{l}.ffn")),
            })
            .collect();
        let dec_layers = (0..cfg.n_layers)
            .map(|l| DecLayer {
                ln_self: norm(&format!("{name}.dec.l{l}.ln_self")),
                self_attn: attn(rng, &format!("{name}.dec.l{l}.self_attn")),
                ln_cross: norm(&format!("{name}.dec.l{l}.ln_cross")),
                cross_attn: attn(rng, &format!("{name}.dec.l{l}.cross_attn")),
                ln_ffn: norm(&format!("{name}.dec.l{l}.ln_ffn")),
                ffn: ffn(rng, &format!("{name}.dec.l{l}.ffn")),
            })
            .collect();

        Ok(Seq2Seq {
            cfg: cfg.clone(),
            name: name.to_string(),
            enc_embed,
            dec_embed,
            out_proj,
            enc_layers,
            dec_layers,
            enc_norm: norm(&format!("{name}.enc.norm")),
            dec_norm: norm(&format!("{name}.dec.norm")),
            positions: sinusoidal_positions(cfg.max_len, cfg.d_model),
        })
    }

    /// Every parameter slot as `(role, handle)`; aliased slots repeat the
    /// same handle under different roles. Order is stable.
    pub fn slots(&self) -> Vec<(String, Param)> {
        let mut out = vec![
            ("enc_embed".to_string(), self.enc_embed.clone()),
            ("dec_embed".to_string(), self.dec_embed.clone()),
            ("out_proj".to_string(), self.out_proj.clone()),
        ];
        let push_norm = |out: &mut Vec<(String, Param)>, role: String, n: &NormParams| {
            out.push((format!("{role}.gain"), n.gain.clone()));
            out.push((format!("{role}.bias"), n.bias.clone()));
        };
        let push_attn = |out: &mut Vec<(String, Param)>, role: String, a: &AttnParams| {
            out.push((format!("{role}.wq"), a.wq.clone()));
            out.push((format!("{role}.wk"), a.wk.clone()));
            out.push((format!("{role}.wv"), a.wv.clone()));
            out.push((format!("{role}.wo"), a.wo.clone()));
        };
        let push_ffn = |out: &mut Vec<(String, Param)>, role: String, f: &FfnParams| {
            out.push((format!("{role}.w1"), f.w1.clone()));
            out.push((format!("{role}.b1"), f.b1.clone()));
            out.push((format!("{role}.w2"), f.w2.clone()));
            out.push((format!("{role}.b2"), f.b2.clone()));
        };
        for (l, layer) in self.enc_layers.iter().enumerate() {
            push_norm(&mut out, format!("enc.l{l}.ln_attn"), &layer.ln_attn);
            push_attn(&mut out, format!("enc.l{l}.attn"), &layer.attn);
            push_norm(&mut out, format!("enc.l{l}.ln_ffn"), &layer.ln_ffn);
            push_ffn(&mut out, format!("enc.l{l}.ffn"), &layer.ffn);
        }
        for (l, layer) in self.dec_layers.iter().enumerate() {
            push_norm(&mut out, format!("dec.l{l}.ln_self"), &layer.ln_self);
            push_attn(&mut out, format!("dec.l{l}.self_attn"), &layer.self_attn);
            push_norm(&mut out, format!("dec.l{l}.ln_cross"), &layer.ln_cross);
            push_attn(&mut out, format!("dec.l{l}.cross_attn"), &layer.cross_attn);
            push_norm(&mut out, format!("dec.l{l}.ln_ffn"), &layer.ln_ffn);
            push_ffn(&mut out, format!("dec.l{l}.ffn"), &layer.ffn);
        }
        push_norm(&mut out, "enc.norm".to_string(), &self.enc_norm);
        push_norm(&mut out, "dec.norm".to_string(), &self.dec_norm);
        out
    }

    /// Unique trainable parameters in stable order (aliases collapsed).
    pub fn params(&self) -> Vec<Param> {
        crate::param::unique_params(&self.slots().into_iter().map(|(_, p)| p).collect::<Vec<_>>())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::contract(format!(
                    "token id {id} out of vocabulary of size {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn positions_node(&self, sess: &mut Session, len: usize) -> NodeId {
        let d = self.cfg.d_model;
        sess.input(Tensor::matrix(
            len,
            d,
            self.positions.data[..len * d].to_vec(),
        ))
    }

    fn embed_stream(
        &self,
        sess: &mut Session,
        table: &Param,
        ids: &[usize],
    ) -> NodeId {
        let t = sess.param(table);
        let e = sess.embed(t, ids);
        let scaled = sess.scale(e, (self.cfg.d_model as f64).sqrt());
        let pos = self.positions_node(sess, ids.len());
        sess.add(scaled, pos)
    }

    fn attention(
        &self,
        sess: &mut Session,
        params: &AttnParams,
        queries: NodeId,
        keys_values: NodeId,
        mask: Option<&Tensor>,
    ) -> NodeId {
        let h = self.cfg.n_heads;
        let dk = self.cfg.d_model / h;
        let scale = 1.0 / (dk as f64).sqrt();

        let wq = sess.param(&params.wq);
        let wk = sess.param(&params.wk);
        let wv = sess.param(&params.wv);
        let wo = sess.param(&params.wo);
        let q = sess.matmul(queries, wq);
        let k = sess.matmul(keys_values, wk);
        let v = sess.matmul(keys_values, wv);

        let mask_node = mask.map(|m| sess.input(m.clone()));
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = sess.slice_cols(q, head * dk, dk);
            let kh = sess.slice_cols(k, head * dk, dk);
            let vh = sess.slice_cols(v, head * dk, dk);
            let scores = sess.matmul_transb(qh, kh);
            let scores = sess.scale(scores, scale);
            let scores = match mask_node {
                Some(m) => sess.add(scores, m),
                None => scores,
            };
            let probs = sess.softmax_rows(scores);
            heads.push(sess.matmul(probs, vh));
        }
        let ctx = sess.concat_cols(&heads);
        sess.matmul(ctx, wo)
    }

    fn ffn_block(&self, sess: &mut Session, params: &FfnParams, x: NodeId) -> NodeId {
        let w1 = sess.param(&params.w1);
        let b1 = sess.param(&params.b1);
        let w2 = sess.param(&params.w2);
        let b2 = sess.param(&params.b2);
        let hinner = sess.matmul(x, w1);
        let hinner = sess.add_row(hinner, b1);
        let hinner = sess.relu(hinner);
        let out = sess.matmul(hinner, w2);
        sess.add_row(out, b2)
    }

    fn norm(&self, sess: &mut Session, params: &NormParams, x: NodeId) -> NodeId {
        let g = sess.param(&params.gain);
        let b = sess.param(&params.bias);
        sess.layer_norm(x, g, b)
    }

    /// Encodes framed source ids (`content + EOS`) into `[S, d]` states.
    pub fn encode(&self, sess: &mut Session, src_framed: &[usize]) -> Result<NodeId> {
        if src_framed.is_empty() {
            return Err(Error::contract("encoder input is empty"));
        }
        if src_framed.len() > self.cfg.max_len {
            return Err(Error::contract(format!(
                "source length {} exceeds max_len {}",
                src_framed.len(),
                self.cfg.max_len
            )));
        }
        self.check_ids(src_framed)?;
        let mut x = self.embed_stream(sess, &self.enc_embed, src_framed);
        for layer in &self.enc_layers {
            let normed = self.norm(sess, &layer.ln_attn, x);
            let att = self.attention(sess, &layer.attn, normed, normed, None);
            x = sess.add(x, att);
            let normed = self.norm(sess, &layer.ln_ffn, x);
            let ff = self.ffn_block(sess, &layer.ffn, normed);
            x = sess.add(x, ff);
        }
        Ok(self.norm(sess, &self.enc_norm, x))
    }

    fn causal_mask(len: usize) -> Tensor {
        let mut m = Tensor::zeros(vec![len, len]);
        for i in 0..len {
            for j in (i + 1)..len {
                m.data[i * len + j] = -1e30;
            }
        }
        m
    }

    /// Runs the decoder over framed input (`BOS + content`) against encoder
    /// states, returning final `[T, d]` states.
    pub fn decode_states(
        &self,
        sess: &mut Session,
        enc_out: NodeId,
        dec_framed: &[usize],
    ) -> Result<NodeId> {
        if dec_framed.is_empty() {
            return Err(Error::contract("decoder input is empty"));
        }
        if dec_framed.len() > self.cfg.max_len {
            return Err(Error::contract(format!(
                "target length {} exceeds max_len {}",
                dec_framed.len(),
                self.cfg.max_len
            )));
        }
        self.check_ids(dec_framed)?;
        let mask = Seq2Seq::causal_mask(dec_framed.len());
        let mut x = self.embed_stream(sess, &self.dec_embed, dec_framed);
        for layer in &self.dec_layers {
            let normed = self.norm(sess, &layer.ln_self, x);
            let att = self.attention(sess, &layer.self_attn, normed, normed, Some(&mask));
            x = sess.add(x, att);
            let normed = self.norm(sess, &layer.ln_cross, x);
            let att = self.attention(sess, &layer.cross_attn, normed, enc_out, None);
            x = sess.add(x, att);
            let normed = self.norm(sess, &layer.ln_ffn, x);
            let ff = self.ffn_block(sess, &layer.ffn, normed);
            x = sess.add(x, ff);
        }
        Ok(self.norm(sess, &self.dec_norm, x))
    }

    /// Projects decoder states to vocabulary logits `[T, V]`.
    pub fn logits(&self, sess: &mut Session, dec_states: NodeId) -> NodeId {
        let w = sess.param(&self.out_proj);
        sess.matmul_transb(dec_states, w)
    }

    /// Builds the full log-probability graph of `tgt` given `src` (content
    /// ids both sides). Returns the scalar sum of per-token log-probs and
    /// the number of predicted tokens (`|tgt| + 1` for EOS).
    pub fn sentence_logprob(
        &self,
        sess: &mut Session,
        src_content: &[usize],
        tgt_content: &[usize],
    ) -> Result<(NodeId, usize)> {
        let enc_out = self.encode(sess, &frame_source(src_content))?;
        self.sentence_logprob_with_enc(sess, enc_out, tgt_content)
    }

    /// Same as [`Seq2Seq::sentence_logprob`] but reusing encoder states,
    /// which lets one encoding serve many candidate targets.
    pub fn sentence_logprob_with_enc(
        &self,
        sess: &mut Session,
        enc_out: NodeId,
        tgt_content: &[usize],
    ) -> Result<(NodeId, usize)> {
        let dec_in = frame_decoder_input(tgt_content);
        let predict = frame_predictions(tgt_content);
        let states = self.decode_states(sess, enc_out, &dec_in)?;
        let logits = self.logits(sess, states);
        let lp = sess.log_softmax_pick(logits, &predict);
        Ok((sess.sum(lp), predict.len()))
    }
}

fn gaussian(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * std).collect())
}

/// Encoder framing: `content + EOS`. Content must be non-empty.
pub fn frame_source(content: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(content.len() + 1);
    v.extend_from_slice(content);
    v.push(EOS);
    v
}

/// Decoder input framing: `BOS + content`.
pub fn frame_decoder_input(content: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(content.len() + 1);
    v.push(BOS);
    v.extend_from_slice(content);
    v
}

/// Prediction targets: `content + EOS`, aligned with the decoder input.
pub fn frame_predictions(content: &[usize]) -> Vec<usize> {
    frame_source(content)
}
