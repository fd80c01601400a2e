//! Named parameter storage shared by every network in a run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Role of a stored tensor. Optimisers use it to decide weight-decay and
/// trust-ratio exclusion; running statistics are never optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Biases and normalisation affine terms are excluded from weight decay
    /// and LARS adaptation.
    pub fn is_excluded_from_adaptation(self) -> bool {
        !matches!(self, ParamKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Mat,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Put a parameter on the tape, tracked for gradients when `track` is
    /// set and the parameter is trainable.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId, track: bool) -> NodeId {
        let e = &self.entries[id.0];
        tape.param(id, e.value.clone(), track && e.kind.is_trainable())
    }

    /// Number of scalar trainable values.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_trainable())
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of all entries.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update((e.value.nrows() as u64).to_le_bytes());
            h.update((e.value.ncols() as u64).to_le_bytes());
            for v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// True when both stores hold the same names, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.dim() == b.value.dim()
                    && a.value
                        .iter()
                        .zip(b.value.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
