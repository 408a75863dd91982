//! Named parameter tensors grouped by the expert that owns them.
//!
//! Values are held as `f64` for arithmetic but always rounded to `f32`
//! precision after initialization and after every update, so a checkpoint
//! written as little-endian `f32` reloads bit-for-bit.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Expert {
    Understanding,
    Generation,
    Planning,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Understanding, Expert::Generation, Expert::Planning];

    fn bit(self) -> u8 {
        match self {
            Expert::Understanding => 1,
            Expert::Generation => 2,
            Expert::Planning => 4,
        }
    }
}

impl fmt::Display for Expert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Expert::Understanding => "understanding",
            Expert::Generation => "generation",
            Expert::Planning => "planning",
        };
        f.write_str(s)
    }
}

/// A subset of the three experts.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<Expert>", into = "Vec<Expert>")]
pub struct ExpertSet(u8);

impl ExpertSet {
    pub const NONE: ExpertSet = ExpertSet(0);
    pub const ALL: ExpertSet = ExpertSet(7);

    pub fn of(experts: &[Expert]) -> Self {
        ExpertSet(experts.iter().fold(0, |acc, e| acc | e.bit()))
    }

    pub fn contains(self, e: Expert) -> bool {
        self.0 & e.bit() != 0
    }

    pub fn with(self, e: Expert) -> Self {
        ExpertSet(self.0 | e.bit())
    }

    pub fn iter(self) -> impl Iterator<Item = Expert> {
        Expert::ALL.into_iter().filter(move |e| self.contains(*e))
    }
}

impl fmt::Debug for ExpertSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl From<Vec<Expert>> for ExpertSet {
    fn from(v: Vec<Expert>) -> Self {
        ExpertSet::of(&v)
    }
}

impl From<ExpertSet> for Vec<Expert> {
    fn from(s: ExpertSet) -> Self {
        s.iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub expert: Expert,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

#[inline]
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        expert: Expert,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                let data = (0..rows * cols)
                    .map(|_| round_f32(dist.sample(rng)))
                    .collect();
                Matrix::from_vec(rows, cols, data).expect("shape")
            }
        };
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            expert,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn expert(&self, id: ParamId) -> Expert {
        self.entries[id.0].expert
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn scalar_count_for(&self, expert: Expert) -> usize {
        self.entries
            .iter()
            .filter(|e| e.expert == expert)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replace every tensor of `expert` with the corresponding tensor of `other`.
    pub fn copy_expert_from(&mut self, other: &ParamStore, expert: Expert) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| e.expert == expert) {
            let src = other
                .id(&e.name)
                .map(|id| other.value(id))
                .ok_or_else(|| Error::Incompatible(format!("missing tensor {}", e.name)))?;
            e.value.ensure_same_shape(src, &e.name)?;
            e.value = src.clone();
        }
        Ok(())
    }

    /// Little-endian `f32` bytes of every tensor belonging to `expert`, in
    /// registration order.
    pub fn expert_bytes(&self, expert: Expert) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| e.expert == expert)
            .flat_map(|e| e.value.data().iter().flat_map(|v| (*v as f32).to_le_bytes()))
            .collect()
    }
}
