//! Shared handles to trainable tensors.
//!
//! A [`Param`] is a cheap clone-able reference to one tensor plus a
//! trainability flag. Handle identity (not name equality) is what the tape
//! and the optimizer key on, so two models holding clones of the same handle
//! genuinely share storage: an update through one is visible through the
//! other, and a tape that registers both sees a single node. This is the
//! mechanism behind the tied source embedding.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Debug)]
struct Inner {
    name: String,
    value: Tensor,
    trainable: bool,
}

#[derive(Debug, Clone)]
pub struct Param(Rc<RefCell<Inner>>);

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Param {
        Param(Rc::new(RefCell::new(Inner {
            name: name.into(),
            value,
            trainable: true,
        })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.0.borrow(), |i| &i.value)
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        RefMut::map(self.0.borrow_mut(), |i| &mut i.value)
    }

    /// Replaces the stored tensor. Shape changes are a caller bug.
    pub fn assign(&self, value: Tensor) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(
            inner.value.shape, value.shape,
            "assign would change shape of {}",
            inner.name
        );
        inner.value = value;
    }

    pub fn is_trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.borrow_mut().trainable = trainable;
    }

    /// Stable identity of the underlying storage for this process.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn ptr_eq(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Order-sensitive FNV-1a checksum over the exact bit patterns; used to
    /// verify byte-level reproducibility and frozen-weight invariants.
    pub fn checksum(&self) -> u64 {
        let inner = self.0.borrow();
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for b in inner.name.bytes() {
            eat(b);
        }
        for x in &inner.value.data {
            for b in x.to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

/// Checksum of a whole parameter list, deduplicated by storage identity so
/// aliased (shared) tensors are counted once.
pub fn checksum_params(params: &[Param]) -> u64 {
    let mut seen = std::collections::HashSet::new();
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for p in params {
        if !seen.insert(p.ptr_id()) {
            continue;
        }
        let c = p.checksum();
        for b in c.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Deduplicates a parameter list by storage identity, preserving first-seen
/// order. Optimizers iterate the result so shared tensors get one update.
pub fn unique_params(params: &[Param]) -> Vec<Param> {
    let mut seen = std::collections::HashSet::new();
    params
        .iter()
        .filter(|p| seen.insert(p.ptr_id()))
        .cloned()
        .collect()
}
