//! Hand-constructed models shared by tests across modules.

use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, Seq2Seq};

/// Hand-built copying model. Every weight is zeroed except: token id t
/// spikes dimension 2+t of the source embedding, positions are replaced
/// with one-hot spikes on dimensions 12..28, and decoder layer 0's
/// cross-attention queries/keys read the position dimensions while its
/// values pass the token dimensions through. One-hot geometry makes every
/// layer-norm see the same statistics at every position, so the attention
/// score is a constant plus a large bump exactly where decoder and source
/// positions agree; the output rows read the copied token dimension back.
/// Greedy decoding therefore reproduces the source exactly, stopping where
/// the source's end marker sits.
pub(crate) fn copy_model() -> Seq2Seq {
    let cfg = ModelConfig {
        vocab_size: 10,
        d_model: 64,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 128,
        max_len: 16,
        tie_decoder_embed: false,
    };
    let mut m = Seq2Seq::init("m", &cfg, &mut Rng::new(1)).unwrap();
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    for (role, p) in m.slots() {
        let shape = p.value().shape.clone();
        if role.ends_with(".gain") {
            p.assign(Tensor::vector(vec![1.0; shape[0]]));
        } else if role.ends_with(".bias") || role.ends_with(".b1") || role.ends_with(".b2") {
            p.assign(Tensor::vector(vec![0.0; shape[0]]));
        } else {
            p.assign(Tensor::new(shape.clone(), vec![0.0; shape.iter().product()]));
        }
    }
    // Token id t occupies dimension 2 + t (dims 2..12); position t
    // occupies dimension 12 + t (dims 12..28, all inside head 0).
    {
        let mut e = m.enc_embed.value_mut();
        for t in 0..v {
            e.data[t * d + 2 + t] = 1.0;
        }
    }
    {
        let mut w = m.out_proj.value_mut();
        for t in 0..v {
            w.data[t * d + 2 + t] = 1.0;
        }
    }
    let mut pos = Tensor::new(vec![cfg.max_len, d], vec![0.0; cfg.max_len * d]);
    for t in 0..cfg.max_len {
        pos.data[t * d + 12 + t] = 8.0;
    }
    m.positions = pos;
    let set_diag = |p: &Param, dims: std::ops::Range<usize>, val: f64| {
        let mut w = p.value_mut();
        for j in dims {
            w.data[j * d + j] = val;
        }
    };
    let layer0 = &m.dec_layers[0].cross_attn;
    let beta = 16.0;
    set_diag(&layer0.wq, 12..12 + cfg.max_len, beta);
    set_diag(&layer0.wk, 12..12 + cfg.max_len, beta);
    set_diag(&layer0.wv, 2..2 + v, 1.0);
    set_diag(&layer0.wo, 0..d, 1.0);
    m
}
