//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] sweeps the
//! tape once in reverse. Leaves are either trainable parameters or detached
//! constants, which is how frozen weights and distillation teachers are kept
//! out of the gradient.

mod error;
mod fdcheck;
mod graph;
mod matrix;

pub use error::DiffError;
pub use fdcheck::{finite_difference_check, finite_difference_report, FdReport, LossBuilder};
pub use graph::{GradientMap, Graph, OpKind, Var};
pub use matrix::Matrix;

