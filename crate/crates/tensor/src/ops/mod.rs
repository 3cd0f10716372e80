//! Differentiable operations, exposed as methods on [`crate::Var`].

pub mod conv;
mod elementwise;
mod filter;
mod loss;
mod matmul;
mod norm;
mod reduce;
pub mod sample;
mod shape;
mod softmax;

pub use elementwise::{BinaryKind, UnaryKind};
pub use filter::FRAME_TAPS;
pub use loss::bce_term;
pub use shape::inverse_permutation;

use crate::{Result, TensorError};

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
