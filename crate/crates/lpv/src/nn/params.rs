//! Named, ordered parameter storage shared by both trainable models.
//!
//! Order is insertion order and is what checkpoints, optimizer state and
//! finite-difference perturbation all key on.

use super::tape::{Gradients, Id, Tape};
use super::tensor::Mat;
use crate::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Mat)>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &Mat {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn try_get(&self, name: &str) -> Result<&Mat> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }

    /// Attach every parameter to the tape as a leaf; the returned ids are in
    /// entry order.
    pub fn attach(&self, tape: &mut Tape) -> ParamIds {
        let ids = self
            .entries
            .iter()
            .map(|(n, m)| (n.clone(), tape.param(m.clone())))
            .collect();
        ParamIds { ids }
    }

    /// Attach every parameter as a constant: inference-only graphs skip
    /// gradient bookkeeping entirely.
    pub fn attach_constant(&self, tape: &mut Tape) -> ParamIds {
        let ids = self
            .entries
            .iter()
            .map(|(n, m)| (n.clone(), tape.constant(m.clone())))
            .collect();
        ParamIds { ids }
    }

    /// Gradients per parameter, in entry order; zeros where none flowed.
    pub fn collect_grads(&self, ids: &ParamIds, grads: &Gradients) -> Vec<Mat> {
        self.entries
            .iter()
            .zip(ids.ids.iter())
            .map(|((_, m), (_, id))| grads.get_or_zeros(*id, m.shape()))
            .collect()
    }

    // Flat-index access, used for finite-difference checks and descent probes.

    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.numel()).sum()
    }

    pub fn get_flat(&self, mut i: usize) -> f64 {
        for (_, m) in &self.entries {
            if i < m.numel() {
                return m.data()[i];
            }
            i -= m.numel();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for (_, m) in &mut self.entries {
            if i < m.numel() {
                m.data_mut()[i] = v;
                return;
            }
            i -= m.numel();
        }
        panic!("flat index out of range");
    }

    /// Name of the parameter owning a flat index, for diagnostics.
    pub fn flat_name(&self, mut i: usize) -> &str {
        for (n, m) in &self.entries {
            if i < m.numel() {
                return n;
            }
            i -= m.numel();
        }
        panic!("flat index out of range");
    }
}

/// Tape ids for an attached [`ParamSet`], keyed by name.
pub struct ParamIds {
    ids: Vec<(String, Id)>,
}

impl ParamIds {
    pub fn id(&self, name: &str) -> Id {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("no attached parameter {name}"))
    }
}
