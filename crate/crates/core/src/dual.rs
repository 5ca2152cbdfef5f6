//! The paired translation system: one model per direction, one shared
//! source-side embedding.
//!
//! The forward model translates source to target; the backward model
//! translates target back to source. The forward encoder's embedding table
//! is the same storage as the backward decoder's input embedding, which —
//! because decoder input and output projections are tied — is also the
//! backward model's output projection. Perturbing that one matrix therefore
//! changes how the forward model reads the source *and* how the backward
//! model writes it, which is exactly the lever the attack stage trains.

use crate::param::{unique_params, Param};
use crate::rng::Rng;
use crate::transformer::{ModelConfig, Seq2Seq, SharedSlots};
use crate::{Error, Result};

pub struct DualSystem {
    pub cfg: ModelConfig,
    pub forward: Seq2Seq,
    pub backward: Seq2Seq,
}

impl DualSystem {
    /// Initializes both directions with a shared source embedding. Requires
    /// tied decoder embeddings — without tying, the backward model's output
    /// projection would fall outside the shared matrix and the attack would
    /// not see the full lever.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<DualSystem> {
        if !cfg.tie_decoder_embed {
            return Err(Error::contract(
                "the dual system requires tie_decoder_embed so the shared \
                 embedding covers the backward output projection",
            ));
        }
        let forward = Seq2Seq::init("forward", cfg, rng)?;
        let backward = Seq2Seq::init_shared(
            "backward",
            cfg,
            rng,
            SharedSlots {
                dec_embed: Some(forward.enc_embed.clone()),
                ..SharedSlots::default()
            },
        )?;
        Ok(DualSystem {
            cfg: cfg.clone(),
            forward,
            backward,
        })
    }

    /// The shared source embedding E.
    pub fn shared_embed(&self) -> Param {
        self.forward.enc_embed.clone()
    }

    /// All parameter slots, roles prefixed by direction. The shared
    /// embedding appears under three roles but is one storage.
    pub fn slots(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (role, p) in self.forward.slots() {
            out.push((format!("forward.{role}"), p));
        }
        for (role, p) in self.backward.slots() {
            out.push((format!("backward.{role}"), p));
        }
        out
    }

    /// Unique trainable parameters across both directions.
    pub fn params(&self) -> Vec<Param> {
        unique_params(&self.slots().into_iter().map(|(_, p)| p).collect::<Vec<_>>())
    }

    /// Attack mode freezes every parameter except the shared embedding.
    /// Turning it off restores full trainability.
    pub fn set_attack_mode(&self, on: bool) {
        let e = self.shared_embed();
        for p in self.params() {
            let is_shared = p.ptr_eq(&e);
            p.set_trainable(!on || is_shared);
        }
    }

    /// Verifies the freeze pattern the attack loop depends on: exactly the
    /// shared embedding trainable, everything else frozen.
    pub fn verify_attack_mode(&self) -> Result<()> {
        let e = self.shared_embed();
        for p in self.params() {
            let is_shared = p.ptr_eq(&e);
            if is_shared && !p.is_trainable() {
                return Err(Error::contract(
                    "attack mode broken: shared embedding is frozen",
                ));
            }
            if !is_shared && p.is_trainable() {
                return Err(Error::contract(format!(
                    "attack mode broken: parameter {} is trainable",
                    p.name()
                )));
            }
        }
        Ok(())
    }

    /// The three roles that must alias one storage; used by tests and by
    /// checkpoint verification.
    pub fn shared_roles() -> [&'static str; 3] {
        [
            "forward.enc_embed",
            "backward.dec_embed",
            "backward.out_proj",
        ]
    }
}
