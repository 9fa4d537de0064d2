//! Central finite-difference verification of analytic gradients.

use crate::error::DiffError;
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;

/// Builds a scalar loss from parameter leaves placed into a fresh graph.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph, params: &[Var]) -> Result<Var, DiffError>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    fn build(&self, g: &mut Graph, params: &[Var]) -> Result<Var, DiffError> {
        self(g, params)
    }
}

fn evaluate(builder: &impl LossBuilder, params: &[Matrix], trainable: bool) -> Result<(Graph, Vec<Var>, Var), DiffError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect();
    let loss = builder.build(&mut g, &vars)?;
    let (rows, cols) = g.value(loss).shape();
    if (rows, cols) != (1, 1) {
        return Err(DiffError::NotScalar { rows, cols });
    }
    Ok((g, vars, loss))
}

/// Per-entry comparison of analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_relative_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Returns the maximum relative error between analytic gradients and central
/// differences `(L(p+e) - L(p-e)) / 2e` over every parameter entry.
pub fn finite_difference_check(
    builder: &impl LossBuilder,
    params: &[Matrix],
    epsilon: f64,
) -> Result<f64, DiffError> {
    finite_difference_report(builder, params, epsilon).map(|r| r.max_relative_error)
}

pub fn finite_difference_report(
    builder: &impl LossBuilder,
    params: &[Matrix],
    epsilon: f64,
) -> Result<FdReport, DiffError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(DiffError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    let (g, vars, loss) = evaluate(builder, params, true)?;
    let first = g.scalar(loss);
    let grads = g.backward(loss)?;
    let second = {
        let (g2, _, l2) = evaluate(builder, params, false)?;
        g2.scalar(l2)
    };
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first, second });
    }

    let mut report = FdReport { max_relative_error: 0.0, worst: None, entries_checked: 0 };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Matrix::zeros(params[pi].rows(), params[pi].cols()));
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + epsilon;
            let (gp, _, lp) = evaluate(builder, &work, false)?;
            work[pi].data_mut()[e] = orig - epsilon;
            let (gm, _, lm) = evaluate(builder, &work, false)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * epsilon);
            let err = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((pi, e));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_error() {
        let builder = |g: &mut Graph, _p: &[Var]| Ok(g.constant(Matrix::filled(1, 1, 4.0)));
        let err = finite_difference_check(&builder, &[Matrix::filled(2, 2, 1.0)], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let builder = |g: &mut Graph, p: &[Var]| g.mean_all(p[0]);
        assert!(finite_difference_check(&builder, &[Matrix::zeros(1, 1)], 0.0).is_err());
    }

    #[test]
    fn detects_non_deterministic_builder() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let builder = |g: &mut Graph, p: &[Var]| {
            calls.set(calls.get() + 1.0);
            let c = g.constant(Matrix::filled(1, 1, calls.get()));
            let m = g.mean_all(p[0])?;
            g.add(m, c)
        };
        let err = finite_difference_check(&builder, &[Matrix::zeros(1, 1)], 1e-5).unwrap_err();
        assert!(matches!(err, DiffError::NonDeterministic { .. }));
    }
}
