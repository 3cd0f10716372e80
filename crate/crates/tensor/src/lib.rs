//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! Values live in [`Tensor`]. Differentiable computation is recorded on a
//! [`Tape`] through [`Var`] handles; [`Tape::backward`] walks the tape in
//! reverse and leaves gradients on every leaf that asked for one. The tape
//! must be [`Tape::reset`] before it can be reused for another step.
//!
//! The kernel set is what a 3D segmentation network with attention needs:
//! batched matmul, softmax, permutes, 3D convolution, trilinear sampling,
//! deformable 3D convolution, layer norm, and a logit-space BCE.

pub mod alloc;
mod error;
mod gemm;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;

pub use error::{Result, TensorError};
pub use ops::conv::Conv3dGeometry;
pub use tape::{Backward, Tape, Var};
pub use tensor::{strides_of, Tensor};
