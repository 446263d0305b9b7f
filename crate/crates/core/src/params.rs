//! Named parameter storage.
//!
//! Every learnable matrix is registered under a dotted path such as
//! `decoder.block0.self.wq`. A store created with [`ParamStore::shapes_only`]
//! records paths and shapes without allocating, which is how large variants
//! are sized.

use std::collections::HashMap;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::Mat;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) resampled until within ±2 std.
    TruncNormal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub path: String,
    pub shape: (usize, usize),
    pub value: Mat,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_path: HashMap<String, usize>,
    rng: Option<ChaCha8Rng>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            by_path: HashMap::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn shapes_only() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_path: HashMap::new(),
            rng: None,
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.rng.is_some()
    }

    pub fn add(&mut self, path: impl Into<String>, shape: (usize, usize), init: Init) -> ParamId {
        let path = path.into();
        assert!(!self.by_path.contains_key(&path), "duplicate parameter path {path}");
        let value = match &mut self.rng {
            None => Mat::zeros((0, 0)),
            Some(rng) => match init {
                Init::Zeros => Mat::zeros(shape),
                Init::Ones => Mat::ones(shape),
                Init::TruncNormal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Mat::from_shape_simple_fn(shape, || loop {
                        let v = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                }
            },
        };
        self.by_path.insert(path.clone(), self.entries.len());
        self.entries.push(ParamEntry { path, shape, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.shape.0 * e.shape.1).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).map(|&i| ParamId(i))
    }

    /// Replaces a value, checking its shape.
    pub fn set(&mut self, id: ParamId, value: Mat) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.dim() != e.shape {
            return Err(Error::Shape(format!("{}: expected {:?}, got {:?}", e.path, e.shape, value.dim())));
        }
        e.value = value.as_standard_layout().into_owned();
        Ok(())
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        assert!(self.is_materialized(), "cannot run a shapes-only store");
        Bound(self.entries.iter().map(|e| tape.param(e.value.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        assert!(self.is_materialized(), "cannot run a shapes-only store");
        Bound(self.entries.iter().map(|e| tape.constant(e.value.clone())).collect())
    }
}

/// Independent sub-seed for stream `stream` of `seed` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
