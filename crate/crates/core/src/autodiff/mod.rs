//! Minimal reverse-mode differentiation over dense `f64` matrices.

mod array;
mod gradcheck;
mod tape;

pub use array::Array2;
pub use gradcheck::{finite_diff_check, relative_error, value_and_grad, FdConfig, FdReport};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", .a.0, .a.1, .b.0, .b.1)]
    Shape { op: &'static str, a: (usize, usize), b: (usize, usize) },
    #[error("buffer of length {len} cannot form a {rows}x{cols} array")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("backward needs a 1x1 root, got {}x{}", .shape.0, .shape.1)]
    NonScalarRoot { shape: (usize, usize) },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Self {
        AutodiffError::Shape { op, a, b }
    }
}
