//! Dense tensors and a reverse-mode tape over row-major matrices.

mod dense;
pub mod kernels;
mod scalar;
mod tape;


pub use dense::{hex, Tensor, TensorId};
pub use scalar::{DType, Scalar};
pub use tape::{Axis, GradSum, Gradients, Tape, Var};

/// Layer-norm epsilon used throughout the backbone.
pub const LAYER_NORM_EPS: f64 = 1e-5;
