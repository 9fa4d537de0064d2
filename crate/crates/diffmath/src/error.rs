use thiserror::Error;

fn fmt_shapes(shapes: &[(usize, usize)]) -> String {
    shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes [{}]", fmt_shapes(shapes))]
    ShapeMismatch { op: &'static str, shapes: Vec<(usize, usize)> },

    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("l2_normalize_rows: row {row} has norm {norm:e} below 1e-12")]
    NormTooSmall { row: usize, norm: f64 },

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("loss builder is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unknown variable id {0}")]
    UnknownVar(usize),
}
