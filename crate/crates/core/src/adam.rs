//! Adam with bias correction, plus the inverse-square-root LR schedule.
//!
//! Moment buffers are keyed by parameter storage identity, so a tensor
//! shared between two models has exactly one `(m, v)` pair and receives one
//! update per step even when both models contributed gradient.

use std::collections::HashMap;

use crate::param::Param;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// One in-place Adam update on a raw value/gradient pair.
///
/// `t` is the 1-based step count used for bias correction; the caller owns
/// the moment vectors. Mismatched lengths are a contract error.
pub fn adam_step(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if value.len() != grad.len() || value.len() != m.len() || value.len() != v.len() {
        return Err(Error::contract(format!(
            "adam_step length mismatch: value {}, grad {}, m {}, v {}",
            value.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::contract("adam_step requires a 1-based step count"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..value.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        value[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer over [`Param`] handles.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    slots: HashMap<usize, Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update from `(param, gradient)` pairs, skipping frozen
    /// parameters. Pairs aliasing the same storage must be pre-summed by the
    /// caller (the tape already guarantees this).
    pub fn step(&mut self, grads: &[(Param, Vec<f64>)]) -> Result<()> {
        self.step += 1;
        for (p, g) in grads {
            if !p.is_trainable() {
                continue;
            }
            let len = p.value().len();
            let slot = self.slots.entry(p.ptr_id()).or_insert_with(|| Slot {
                m: vec![0.0; len],
                v: vec![0.0; len],
            });
            adam_step(
                &mut p.value_mut().data,
                g,
                &mut slot.m,
                &mut slot.v,
                self.step,
                &self.cfg,
            )?;
        }
        Ok(())
    }

    /// Drops all moment state, as done when a training phase restarts from a
    /// checkpoint with a fresh optimizer.
    pub fn reset(&mut self) {
        self.step = 0;
        self.slots.clear();
    }
}

/// Inverse-square-root schedule with linear warmup: the multiplier rises to
/// 1 over `warmup` steps and then decays as `sqrt(warmup / step)`.
pub fn inverse_sqrt_lr(base_lr: f64, warmup: u64, step: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step < warmup {
        base_lr * step / warmup
    } else {
        base_lr * (warmup / step).sqrt()
    }
}
