//! Named parameter storage and graph binding.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use diffmath::{Graph, Matrix, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Ordered map from parameter name to value. Names are dotted paths such as
/// `audio.layer0.attn.wq`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// Places every parameter in `g`: names in `trainable` become gradient
    /// leaves, everything else detached constants.
    pub fn bind(&self, g: &mut Graph, trainable: &BTreeSet<String>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable.contains(k) { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars, prefix: String::new() }
    }

    /// Every value rounded through `f32`.
    pub fn round_to_f32(&self) -> ParamStore {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.round_to_f32())).collect() }
    }
}

/// Parameters placed in a graph, looked up by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
    prefix: String,
}

impl Bound {
    pub(crate) fn from_vars(vars: HashMap<String, Var>) -> Self {
        Bound { vars, prefix: String::new() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        let full = format!("{}{name}", self.prefix);
        self.vars.get(&full).copied().ok_or(Error::MissingParam(full))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(&format!("{}{name}", self.prefix))
    }

    /// View whose lookups are relative to `prefix`.
    pub fn scope(&self, prefix: &str) -> Bound {
        Bound { vars: self.vars.clone(), prefix: format!("{}{prefix}", self.prefix) }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}
