//! Audio-text prompt generation: one set of audio prompts steers both
//! encoders. Text prefix and postfix prompts are affine images of the audio
//! prompts, so gradients from either modality reach the same parameters.

use std::collections::BTreeSet;

use diffmath::{Graph, Matrix, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{normal_matrix, Bound, ParamStore};

pub const PROMPTS: &str = "atpg.prompts";
pub const S_PRE_WEIGHT: &str = "atpg.s_pre.weight";
pub const S_PRE_BIAS: &str = "atpg.s_pre.bias";
pub const S_POST_WEIGHT: &str = "atpg.s_post.weight";
pub const S_POST_BIAS: &str = "atpg.s_post.bias";

/// Affine map `x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearMap {
    pub fn identity(d: usize) -> Self {
        Self { weight: Matrix::identity(d), bias: Matrix::zeros(1, d) }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.constant(x.clone());
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let y = affine(&mut g, x, w, b)?;
        Ok(g.value(y).clone())
    }
}

/// Trainable ATPG state.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// `n x d` audio prompts.
    pub prompts: Matrix,
    pub s_pre: LinearMap,
    pub s_post: LinearMap,
    /// 1-based audio layer the prompts are prepended at.
    pub inject_layer: usize,
}

impl PromptSet {
    /// Prompts ~ N(0, 0.02²); both maps start as identity with zero bias.
    pub fn init(n: usize, d: usize, inject_layer: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("at least one audio prompt is required".into()));
        }
        Ok(Self {
            prompts: normal_matrix(rng, n, d, 0.02),
            s_pre: LinearMap::identity(d),
            s_post: LinearMap::identity(d),
            inject_layer,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.rows() == 0
    }

    /// `(T_pre, T_post)` recomputed from the current prompts.
    pub fn text_prompts(&self) -> Result<(Matrix, Matrix)> {
        Ok((self.s_pre.apply(&self.prompts)?, self.s_post.apply(&self.prompts)?))
    }

    pub fn write_params(&self, store: &mut ParamStore) {
        store.insert(PROMPTS, self.prompts.clone());
        store.insert(S_PRE_WEIGHT, self.s_pre.weight.clone());
        store.insert(S_PRE_BIAS, self.s_pre.bias.clone());
        store.insert(S_POST_WEIGHT, self.s_post.weight.clone());
        store.insert(S_POST_BIAS, self.s_post.bias.clone());
    }

    pub fn read_params(store: &ParamStore, inject_layer: usize) -> Result<Self> {
        Ok(Self {
            prompts: store.get(PROMPTS)?.clone(),
            s_pre: LinearMap { weight: store.get(S_PRE_WEIGHT)?.clone(), bias: store.get(S_PRE_BIAS)?.clone() },
            s_post: LinearMap { weight: store.get(S_POST_WEIGHT)?.clone(), bias: store.get(S_POST_BIAS)?.clone() },
            inject_layer,
        })
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let (xd, (wr, wc), (br, bc)) = (g.value(x).cols(), g.value(w).shape(), g.value(b).shape());
    if xd != wr || br != 1 || bc != wc {
        return Err(Error::Config(format!(
            "prompt map expects {wr}-wide input and a 1x{wc} bias, got {xd}-wide input and {br}x{bc} bias"
        )));
    }
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// Differentiable text prompt generation inside a graph.
///
/// `p` must expose the `atpg.` parameter names.
pub fn generate_text_prompts(g: &mut Graph, p: &Bound) -> Result<(Var, Var, Var)> {
    let a = p.get(PROMPTS)?;
    let t_pre = affine(g, a, p.get(S_PRE_WEIGHT)?, p.get(S_PRE_BIAS)?)?;
    let t_post = affine(g, a, p.get(S_POST_WEIGHT)?, p.get(S_POST_BIAS)?)?;
    Ok((a, t_pre, t_post))
}

/// Prepends `prompts` to every sample of a row-stacked batch.
pub fn prepend_rows(g: &mut Graph, x: Var, lens: &[usize], prompts: Var) -> Result<(Var, Vec<usize>)> {
    let (n, width) = g.value(prompts).shape();
    if n == 0 {
        return Ok((x, lens.to_vec()));
    }
    if width != g.value(x).cols() {
        return Err(Error::Config(format!(
            "audio prompt width {width} does not match layer width {}",
            g.value(x).cols()
        )));
    }
    let mut parts = Vec::with_capacity(2 * lens.len());
    let mut o = 0;
    for &len in lens {
        parts.push(prompts);
        parts.push(g.slice_rows(x, o, len)?);
        o += len;
    }
    let out = g.concat_rows(&parts)?;
    Ok((out, lens.iter().map(|l| l + n).collect()))
}

/// Overwrites the leading `prompts.rows()` rows of every sample.
pub fn replace_leading_rows(g: &mut Graph, x: Var, lens: &[usize], prompts: Var) -> Result<(Var, Vec<usize>)> {
    let n = g.value(prompts).rows();
    if n == 0 {
        return Ok((x, lens.to_vec()));
    }
    let mut parts = Vec::with_capacity(2 * lens.len());
    let mut o = 0;
    for &len in lens {
        if len <= n {
            return Err(Error::Config(format!("cannot replace {n} prompt rows in a {len}-row sequence")));
        }
        parts.push(prompts);
        parts.push(g.slice_rows(x, o + n, len - n)?);
        o += len;
    }
    Ok((g.concat_rows(&parts)?, lens.to_vec()))
}

/// Enforces the single-layer injection policy for audio prompts.
#[derive(Debug)]
pub struct PromptInjector {
    layer: usize,
    done: bool,
}

impl PromptInjector {
    pub fn new(layer: usize) -> Self {
        Self { layer, done: false }
    }

    /// Prepends `prompts` when `current_layer` is the injection layer;
    /// otherwise returns the states untouched. A second injection is an error.
    pub fn inject(
        &mut self,
        g: &mut Graph,
        current_layer: usize,
        x: Var,
        lens: &[usize],
        prompts: Var,
    ) -> Result<(Var, Vec<usize>)> {
        if current_layer != self.layer {
            return Ok((x, lens.to_vec()));
        }
        if self.done {
            return Err(Error::RepeatedInjection(self.layer));
        }
        self.done = true;
        prepend_rows(g, x, lens, prompts)
    }
}

/// Parameter names that receive gradients under a strategy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainablePartition {
    names: BTreeSet<String>,
}

impl TrainablePartition {
    pub fn new(names: impl IntoIterator<Item = String>) -> Self {
        Self { names: names.into_iter().collect() }
    }

    pub fn names(&self) -> &BTreeSet<String> {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// Every name must exist in `store`.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for n in &self.names {
            store.get(n)?;
        }
        Ok(())
    }
}

/// Exact number of trainable scalar entries.
pub fn count_trainable(partition: &TrainablePartition, store: &ParamStore) -> Result<usize> {
    partition.names.iter().map(|n| store.get(n).map(Matrix::len)).sum()
}
