//! Tape-based reverse-mode differentiation.
//!
//! Every [`Var`] is an index into the graph's node list. Inputs always have
//! smaller indices than the nodes consuming them, so the node list is a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use crate::error::DiffError;
use crate::matrix::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;
const MIN_ROW_NORM: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Differentiable operations. Attributes travel inside the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Matmul,
    /// Same shape, or the right operand broadcast as a 1xC row or a 1x1 scalar.
    Add,
    Scale(f64),
    ConcatRows,
    SliceRows { start: usize, len: usize },
    ConcatCols,
    SliceCols { start: usize, len: usize },
    RowSoftmax,
    Log,
    Exp,
    /// Broadcasting rules as for `Add`.
    ElementwiseMul,
    MeanAll,
    /// Column-wise mean over rows, giving a 1xC row.
    MeanRows,
    L2NormalizeRows,
    /// Per-row standardisation without affine parameters.
    LayerNormRows,
    Relu,
    Transpose,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::MeanAll => "mean_all",
            OpKind::MeanRows => "mean_rows",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::LayerNormRows => "layer_norm_rows",
            OpKind::Relu => "relu",
            OpKind::Transpose => "transpose",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    /// `None` for leaves.
    op: Option<OpKind>,
    inputs: Vec<Var>,
    value: Matrix,
    requires_grad: bool,
    /// Per-row statistics cached by normalisation ops.
    aux: Vec<f64>,
}

/// Gradients of a scalar loss keyed by parameter leaf.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: HashMap<Var, Matrix>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Matrix)> {
        self.grads.iter()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.remove(&v)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Full,
    Row,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Matrix, b: &Matrix) -> Result<Broadcast, DiffError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Full)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else if b.shape() == (1, 1) {
        Ok(Broadcast::Scalar)
    } else {
        Err(DiffError::ShapeMismatch { op, shapes: vec![a.shape(), b.shape()] })
    }
}

/// `f(x, b)` elementwise with `b` broadcast to `x`'s shape.
fn zip_broadcast(x: &Matrix, b: &Matrix, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = Vec::with_capacity(x.len());
    match kind {
        Broadcast::Full => out.extend(x.data().iter().zip(b.data()).map(|(&u, &v)| f(u, v))),
        Broadcast::Row => {
            for r in 0..x.rows() {
                out.extend(x.row(r).iter().zip(b.data()).map(|(&u, &v)| f(u, v)));
            }
        }
        Broadcast::Scalar => {
            let v = b.data()[0];
            out.extend(x.data().iter().map(|&u| f(u, v)));
        }
    }
    Matrix::from_raw(x.rows(), x.cols(), out)
}

/// Sums `g` down to the shape of a broadcast operand.
fn reduce_broadcast(g: &Matrix, kind: Broadcast) -> Matrix {
    match kind {
        Broadcast::Full => g.clone(),
        Broadcast::Row => {
            let mut out = vec![0.0; g.cols()];
            for r in 0..g.rows() {
                for (o, v) in out.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            Matrix::from_raw(1, g.cols(), out)
        }
        Broadcast::Scalar => Matrix::from_raw(1, 1, vec![g.sum()]),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// Detached leaf; never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: None, inputs: Vec::new(), value, requires_grad, aux: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node, DiffError> {
        self.nodes.get(v.0).ok_or(DiffError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    /// Records `op` applied to `inputs`, computing its value eagerly.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, DiffError> {
        for &v in inputs {
            self.node(v)?;
        }
        let name = op.name();
        let arity_err = |want: &str| DiffError::InvalidArgument {
            op: name,
            reason: format!("expected {want} input(s), got {}", inputs.len()),
        };
        let unary = matches!(
            op,
            OpKind::Scale(_)
                | OpKind::SliceRows { .. }
                | OpKind::SliceCols { .. }
                | OpKind::RowSoftmax
                | OpKind::Log
                | OpKind::Exp
                | OpKind::MeanAll
                | OpKind::MeanRows
                | OpKind::L2NormalizeRows
                | OpKind::LayerNormRows
                | OpKind::Relu
                | OpKind::Transpose
        );
        let binary = matches!(op, OpKind::Matmul | OpKind::Add | OpKind::ElementwiseMul);
        if unary && inputs.len() != 1 {
            return Err(arity_err("1"));
        }
        if binary && inputs.len() != 2 {
            return Err(arity_err("2"));
        }
        if inputs.is_empty() {
            return Err(arity_err("at least 1"));
        }

        let x = &self.nodes[inputs[0].0].value;
        let mut aux = Vec::new();
        let value = match &op {
            OpKind::Matmul => x.matmul(&self.nodes[inputs[1].0].value)?,
            OpKind::Add | OpKind::ElementwiseMul => {
                let b = &self.nodes[inputs[1].0].value;
                let kind = broadcast_kind(name, x, b)?;
                if matches!(op, OpKind::ElementwiseMul) {
                    zip_broadcast(x, b, kind, |u, v| u * v)
                } else {
                    zip_broadcast(x, b, kind, |u, v| u + v)
                }
            }
            OpKind::Scale(s) => x.scaled(*s),
            OpKind::ConcatRows => {
                let parts: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                Matrix::stack_rows(&parts)?
            }
            OpKind::ConcatCols => {
                let parts: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let rows = parts[0].rows();
                if parts.iter().any(|m| m.rows() != rows) {
                    return Err(DiffError::ShapeMismatch {
                        op: name,
                        shapes: parts.iter().map(|m| m.shape()).collect(),
                    });
                }
                let cols: usize = parts.iter().map(|m| m.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in &parts {
                        data.extend_from_slice(p.row(r));
                    }
                }
                Matrix::from_raw(rows, cols, data)
            }
            OpKind::SliceRows { start, len } => {
                if *len == 0 || start + len > x.rows() {
                    return Err(DiffError::InvalidArgument {
                        op: name,
                        reason: format!("rows {start}..{} out of 0..{}", start + len, x.rows()),
                    });
                }
                x.slice_rows(*start, *len)
            }
            OpKind::SliceCols { start, len } => {
                if *len == 0 || start + len > x.cols() {
                    return Err(DiffError::InvalidArgument {
                        op: name,
                        reason: format!("cols {start}..{} out of 0..{}", start + len, x.cols()),
                    });
                }
                let mut data = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                Matrix::from_raw(x.rows(), *len, data)
            }
            OpKind::RowSoftmax => {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                out
            }
            OpKind::Log => {
                if let Some(i) = x.data().iter().position(|&v| v <= 0.0) {
                    return Err(DiffError::NonFinite { op: name, index: i });
                }
                x.map(f64::ln)
            }
            OpKind::Exp => x.map(f64::exp),
            OpKind::MeanAll => {
                if x.is_empty() {
                    return Err(DiffError::InvalidArgument { op: name, reason: "empty input".into() });
                }
                Matrix::from_raw(1, 1, vec![x.sum() / x.len() as f64])
            }
            OpKind::MeanRows => {
                let mut out = vec![0.0; x.cols()];
                for r in 0..x.rows() {
                    for (o, v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                let n = x.rows() as f64;
                Matrix::from_raw(1, x.cols(), out.into_iter().map(|v| v / n).collect())
            }
            OpKind::L2NormalizeRows => {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < MIN_ROW_NORM {
                        return Err(DiffError::NormTooSmall { row: r, norm });
                    }
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    aux.push(norm);
                }
                out
            }
            OpKind::LayerNormRows => {
                let mut out = x.clone();
                let n = x.cols() as f64;
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * inv_std;
                    }
                    aux.push(inv_std);
                }
                out
            }
            OpKind::Relu => x.map(|v| v.max(0.0)),
            OpKind::Transpose => x.transpose(),
        };
        if !value.data().iter().fold(true, |ok, v| ok & v.is_finite()) {
            let i = value.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(DiffError::NonFinite { op: name, index: i });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op: Some(op), inputs: inputs.to_vec(), value, requires_grad, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    /// `a - b`, expressed as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        self.apply(OpKind::Scale(s), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        self.apply(OpKind::SliceRows { start, len }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        self.apply(OpKind::ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        self.apply(OpKind::SliceCols { start, len }, &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::RowSoftmax, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::ElementwiseMul, &[a, b])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::MeanAll, &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::MeanRows, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::L2NormalizeRows, &[a])
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::LayerNormRows, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Transpose, &[a])
    }

    /// Exact gradients of the scalar `loss` with respect to every parameter
    /// leaf it depends on. Constants receive nothing.
    pub fn backward(&self, loss: Var) -> Result<GradientMap, DiffError> {
        let (rows, cols) = self.node(loss)?.value.shape();
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NotScalar { rows, cols });
        }
        let mut out = GradientMap::default();
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    out.grads.insert(Var(id), g);
                }
                Some(op) => self.propagate(op, node, g, &mut grads),
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `g` into the block of `v`'s gradient starting at (`row`, `col`).
    fn accumulate_block(&self, grads: &mut [Option<Matrix>], v: Var, row: usize, col: usize, g: &Matrix) {
        let (rows, cols) = self.nodes[v.0].value.shape();
        let target = grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
        for r in 0..g.rows() {
            let dst = &mut target.row_mut(row + r)[col..col + g.cols()];
            for (d, s) in dst.iter_mut().zip(g.row(r)) {
                *d += s;
            }
        }
    }

    fn propagate(&self, op: &OpKind, node: &Node, g: Matrix, grads: &mut [Option<Matrix>]) {
        let ins = &node.inputs;
        let x = &self.nodes[ins[0].0].value;
        let y = &node.value;
        match op {
            OpKind::Matmul => {
                let b = &self.nodes[ins[1].0].value;
                if self.wants(ins[0]) {
                    let da = g.matmul_t(false, b, true).expect("shapes checked in forward");
                    Self::accumulate(grads, ins[0], da);
                }
                if self.wants(ins[1]) {
                    let db = x.matmul_t(true, &g, false).expect("shapes checked in forward");
                    Self::accumulate(grads, ins[1], db);
                }
            }
            OpKind::Add => {
                let b = &self.nodes[ins[1].0].value;
                let kind = broadcast_kind("add", x, b).expect("checked in forward");
                if self.wants(ins[1]) {
                    Self::accumulate(grads, ins[1], reduce_broadcast(&g, kind));
                }
                if self.wants(ins[0]) {
                    Self::accumulate(grads, ins[0], g);
                }
            }
            OpKind::ElementwiseMul => {
                let b = &self.nodes[ins[1].0].value;
                let kind = broadcast_kind("elementwise_mul", x, b).expect("checked in forward");
                if self.wants(ins[0]) {
                    let da = zip_broadcast(&g, b, kind, |u, v| u * v);
                    Self::accumulate(grads, ins[0], da);
                }
                if self.wants(ins[1]) {
                    let full = zip_broadcast(&g, x, Broadcast::Full, |u, v| u * v);
                    Self::accumulate(grads, ins[1], reduce_broadcast(&full, kind));
                }
            }
            OpKind::Scale(s) => {
                if self.wants(ins[0]) {
                    Self::accumulate(grads, ins[0], g.scaled(*s));
                }
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                for &v in ins {
                    let rows = self.nodes[v.0].value.rows();
                    if self.wants(v) {
                        Self::accumulate(grads, v, g.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            OpKind::ConcatCols => {
                let mut offset = 0;
                for &v in ins {
                    let cols = self.nodes[v.0].value.cols();
                    if self.wants(v) {
                        let mut data = Vec::with_capacity(g.rows() * cols);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        let part = Matrix::from_raw(g.rows(), cols, data);
                        Self::accumulate(grads, v, part);
                    }
                    offset += cols;
                }
            }
            OpKind::SliceRows { start, .. } => {
                if self.wants(ins[0]) {
                    self.accumulate_block(grads, ins[0], *start, 0, &g);
                }
            }
            OpKind::SliceCols { start, .. } => {
                if self.wants(ins[0]) {
                    self.accumulate_block(grads, ins[0], 0, *start, &g);
                }
            }
            OpKind::RowSoftmax => {
                let mut dx = g;
                for r in 0..dx.rows() {
                    let yr = y.row(r);
                    let gr = dx.row_mut(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, yv) in gr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                Self::accumulate(grads, ins[0], dx);
            }
            OpKind::Log => {
                let dx = zip_broadcast(&g, x, Broadcast::Full, |u, v| u / v);
                Self::accumulate(grads, ins[0], dx);
            }
            OpKind::Exp => {
                let dx = zip_broadcast(&g, y, Broadcast::Full, |u, v| u * v);
                Self::accumulate(grads, ins[0], dx);
            }
            OpKind::MeanAll => {
                let v = g.get(0, 0) / x.len() as f64;
                Self::accumulate(grads, ins[0], Matrix::filled(x.rows(), x.cols(), v));
            }
            OpKind::MeanRows => {
                let n = x.rows() as f64;
                let dx = Matrix::from_fn(x.rows(), x.cols(), |_, c| g.get(0, c) / n);
                Self::accumulate(grads, ins[0], dx);
            }
            OpKind::L2NormalizeRows => {
                let mut dx = g;
                for r in 0..dx.rows() {
                    let yr = y.row(r);
                    let norm = node.aux[r];
                    let gr = dx.row_mut(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, yv) in gr.iter_mut().zip(yr) {
                        *d = (*d - yv * dot) / norm;
                    }
                }
                Self::accumulate(grads, ins[0], dx);
            }
            OpKind::LayerNormRows => {
                let mut dx = g;
                let n = dx.cols() as f64;
                for r in 0..dx.rows() {
                    let yr = y.row(r);
                    let inv_std = node.aux[r];
                    let gr = dx.row_mut(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (d, yv) in gr.iter_mut().zip(yr) {
                        *d = inv_std * (*d - mean_g - yv * mean_gy);
                    }
                }
                Self::accumulate(grads, ins[0], dx);
            }
            OpKind::Relu => {
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                Self::accumulate(grads, ins[0], dx);
            }
            OpKind::Transpose => {
                Self::accumulate(grads, ins[0], g.transpose());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Matrix::identity(2));
        let out = g.matmul(a, i).unwrap();
        assert_eq!(g.value(out), &Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(1, 3));
        let s = g.row_softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_places_prompts_first() {
        let mut g = Graph::new();
        let prompts = g.constant(Matrix::filled(12, 8, 1.0));
        let tokens = g.constant(Matrix::filled(20, 8, 2.0));
        let seq = g.concat_rows(&[prompts, tokens]).unwrap();
        let v = g.value(seq);
        assert_eq!(v.shape(), (32, 8));
        assert!(v.row(11).iter().all(|&x| x == 1.0));
        assert!(v.row(12).iter().all(|&x| x == 2.0));
    }

    #[test]
    fn mean_all_gradient() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let loss = g.mean_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Matrix::filled(2, 2, 0.25));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_rows(&[&[3.0]]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Matrix::zeros(2, 2));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(DiffError::NotScalar { rows: 2, cols: 2 })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Matrix::from_rows(&[&[1.0, 2.0]]));
        let t = g.constant(Matrix::from_rows(&[&[0.5, 0.5]]));
        let p = g.mul(w, t).unwrap();
        let loss = g.mean_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(t).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn shape_errors_name_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [2x3, 2x3]");
    }

    #[test]
    fn non_finite_results_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::filled(1, 1, 800.0));
        assert!(matches!(g.exp(a), Err(DiffError::NonFinite { op: "exp", .. })));
        let z = g.constant(Matrix::zeros(1, 2));
        assert!(matches!(g.log(z), Err(DiffError::NonFinite { op: "log", .. })));
    }

    #[test]
    fn tiny_rows_cannot_be_normalised() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::from_rows(&[&[1.0, 0.0], &[1e-13, 0.0]]));
        assert!(matches!(g.l2_normalize_rows(a), Err(DiffError::NormTooSmall { row: 1, .. })));
    }

    #[test]
    fn repeated_concat_input_accumulates() {
        let mut g = Graph::new();
        let p = g.param(Matrix::from_rows(&[&[1.0, 1.0]]));
        let t = g.constant(Matrix::from_rows(&[&[5.0, 5.0]]));
        let seq = g.concat_rows(&[p, t, p, t]).unwrap();
        let loss = g.mean_all(seq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &Matrix::filled(1, 2, 2.0 / 8.0));
    }
}
