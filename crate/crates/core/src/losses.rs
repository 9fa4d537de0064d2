//! Training objectives built from differentiable graph ops.
//!
//! Embedding rows and similarity rows become distributions through a row-wise
//! softmax (temperature 1 for embeddings, `1/tau` already folded into the
//! similarity logits). KL terms are averaged over rows.

use diffmath::{DiffError, Graph, Matrix, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5, alpha: 0.1, tau: 0.07 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("tau", self.tau)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative and finite, got {v}")));
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Which distillation terms participate in the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillToggles {
    pub feature: bool,
    pub similarity: bool,
}

impl DistillToggles {
    pub const ALL: Self = Self { feature: true, similarity: true };
    pub const NONE: Self = Self { feature: false, similarity: false };
}

/// `a2t[i][j] = <E_a[i], E_t[j]> / tau` and its transpose.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityPair {
    pub a2t: Var,
    pub t2a: Var,
}

/// Audio and text embeddings of the same pairs, row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct BatchEmbeddings {
    pub audio: Var,
    pub text: Var,
}

fn component<T>(name: &'static str, r: std::result::Result<T, DiffError>) -> Result<T> {
    r.map_err(|source| Error::LossComponent { component: name, source })
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &'static str) -> std::result::Result<(), DiffError> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(DiffError::ShapeMismatch { op, shapes: vec![sa, sb] });
    }
    Ok(())
}

pub fn similarity_matrices(g: &mut Graph, batch: BatchEmbeddings, tau: f64) -> Result<SimilarityPair> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    component("similarity", (|| {
        same_shape(g, batch.audio, batch.text, "similarity_matrices")?;
        let tt = g.transpose(batch.text)?;
        let dots = g.matmul(batch.audio, tt)?;
        let a2t = g.scale(dots, 1.0 / tau)?;
        let t2a = g.transpose(a2t)?;
        Ok(SimilarityPair { a2t, t2a })
    })())
}

/// `-(1/N) sum_i log softmax_row(C)[i][i]`.
fn cross_entropy_diag(g: &mut Graph, c: Var) -> std::result::Result<Var, DiffError> {
    let (r, k) = g.value(c).shape();
    if r != k {
        return Err(DiffError::ShapeMismatch { op: "contrastive_loss", shapes: vec![(r, k)] });
    }
    let p = g.row_softmax(c)?;
    let lp = g.log(p)?;
    let eye = g.constant(Matrix::identity(r));
    let diag = g.mul(lp, eye)?;
    let m = g.mean_all(diag)?;
    g.scale(m, -(r as f64))
}

/// `(L_t2a, L_a2t)`.
pub fn contrastive_directions(g: &mut Graph, pair: SimilarityPair) -> Result<(Var, Var)> {
    component("contrastive", (|| Ok((cross_entropy_diag(g, pair.t2a)?, cross_entropy_diag(g, pair.a2t)?)))())
}

/// Symmetric cross-entropy `L_t2a + L_a2t` with the diagonal as positives.
pub fn contrastive_loss(g: &mut Graph, pair: SimilarityPair) -> Result<Var> {
    let (t2a, a2t) = contrastive_directions(g, pair)?;
    component("contrastive", g.add(t2a, a2t))
}

/// Row-averaged `KL(softmax(x) || softmax(y))`.
pub fn mean_row_kl(g: &mut Graph, x: Var, y: Var) -> std::result::Result<Var, DiffError> {
    same_shape(g, x, y, "mean_row_kl")?;
    let cols = g.value(x).cols() as f64;
    let p = g.row_softmax(x)?;
    let q = g.row_softmax(y)?;
    let lp = g.log(p)?;
    let lq = g.log(q)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let m = g.mean_all(terms)?;
    g.scale(m, cols)
}

/// Symmetric KL between per-row softmax distributions of the two modalities.
pub fn kl_alignment_loss(g: &mut Graph, batch: BatchEmbeddings) -> Result<Var> {
    component("kl_alignment", (|| {
        let pq = mean_row_kl(g, batch.audio, batch.text)?;
        let qp = mean_row_kl(g, batch.text, batch.audio)?;
        g.add(pq, qp)
    })())
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Matrix::zeros(1, 1))
}

/// Student-to-teacher KL on both modalities' embeddings; 0 without a teacher.
pub fn feature_distillation_loss(g: &mut Graph, student: BatchEmbeddings, teacher: Option<BatchEmbeddings>) -> Result<Var> {
    let Some(t) = teacher else { return Ok(zero(g)) };
    component("feature_distillation", (|| {
        let a = mean_row_kl(g, student.audio, t.audio)?;
        let b = mean_row_kl(g, student.text, t.text)?;
        g.add(a, b)
    })())
}

/// Student-to-teacher KL on both similarity directions; 0 without a teacher.
pub fn similarity_distillation_loss(g: &mut Graph, student: SimilarityPair, teacher: Option<SimilarityPair>) -> Result<Var> {
    let Some(t) = teacher else { return Ok(zero(g)) };
    component("similarity_distillation", (|| {
        let a = mean_row_kl(g, student.t2a, t.t2a)?;
        let b = mean_row_kl(g, student.a2t, t.a2t)?;
        g.add(a, b)
    })())
}

/// Every component node plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub kl: Var,
    pub contrast: Var,
    pub feature: Var,
    pub similarity: Var,
    pub total: Var,
}

/// Component values read back from a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub kl: f64,
    pub contrast: f64,
    pub feature: f64,
    pub similarity: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            kl: g.scalar(self.kl),
            contrast: g.scalar(self.contrast),
            feature: g.scalar(self.feature),
            similarity: g.scalar(self.similarity),
            total: g.scalar(self.total),
        }
    }
}

/// `L_kl + lambda L_contrast + L_FD + alpha L_SD`.
///
/// `teacher` holds the previous snapshot's embeddings of the same batch as
/// detached constants; disabled terms contribute a constant zero.
pub fn total_loss(
    g: &mut Graph,
    batch: BatchEmbeddings,
    teacher: Option<BatchEmbeddings>,
    weights: LossWeights,
    toggles: DistillToggles,
) -> Result<LossTerms> {
    weights.validate()?;
    let pair = similarity_matrices(g, batch, weights.tau)?;
    let kl = kl_alignment_loss(g, batch)?;
    let contrast = contrastive_loss(g, pair)?;
    let feature = feature_distillation_loss(g, batch, teacher.filter(|_| toggles.feature))?;
    let teacher_pair = match teacher.filter(|_| toggles.similarity) {
        Some(t) => Some(similarity_matrices(g, t, weights.tau)?),
        None => None,
    };
    let similarity = similarity_distillation_loss(g, pair, teacher_pair)?;
    for (name, v) in [
        ("kl_alignment", kl),
        ("contrastive", contrast),
        ("feature_distillation", feature),
        ("similarity_distillation", similarity),
    ] {
        let value = g.scalar(v);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { component: name, value });
        }
    }
    let total = component("total", (|| {
        let c = g.scale(contrast, weights.lambda)?;
        let s = g.scale(similarity, weights.alpha)?;
        let t = g.add(kl, c)?;
        let t = g.add(t, feature)?;
        g.add(t, s)
    })())?;
    Ok(LossTerms { kl, contrast, feature, similarity, total })
}
