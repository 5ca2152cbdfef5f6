//! Doubly-trained adversarial augmentation for small neural translation models.
//!
//! The crate trains a pair of tiny transformer translation models that share
//! a source-side embedding matrix, attacks that embedding so the forward
//! direction breaks while the backward direction keeps the meaning readable,
//! turns the attacked embedding into adversarial training data via
//! nearest-neighbour token replacement, and finally measures how much each
//! retrained model degrades on synthetically noised test sets.
//!
//! Everything is CPU-only `f64` with a hand-rolled reverse-mode tape, so runs
//! are bit-reproducible for a given seed on a given target.

pub mod adam;
pub mod attack;
pub mod bpe;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod dual;
pub mod eval;
pub mod metrics;
pub mod objectives;
pub mod param;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod transformer;
pub mod vocab;

use std::path::PathBuf;

/// Unified error type. The variants map onto process exit codes:
/// contract violations and malformed inputs exit 1, numeric divergence
/// exits 2, missing artifacts exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An API contract was violated (bad shapes, out-of-range ids,
    /// inconsistent configuration, malformed file contents).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric invariant failed at runtime (NaN/Inf, divergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A required input artifact does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Exit code this error maps to in the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Io(_) => 1,
            Error::Numeric(_) => 2,
            Error::MissingArtifact(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
