//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! walks the recorded nodes in reverse and returns [`Gradients`] for every
//! leaf created with `requires_grad`. The operation set is deliberately
//! small: matrix products, broadcasting elementwise arithmetic, reductions,
//! softmax and layer normalization, shape manipulation, and the handful of
//! spatial kernels a convolutional feature pyramid needs.

mod conv;
mod elementwise;
mod error;
pub mod gradcheck;
mod linalg;
mod reduce;
mod shape;
mod tape;
mod tensor;

pub use elementwise::{broadcast_shape, sigmoid, softplus};
pub use error::{Result, TensorError};
pub use reduce::LAYER_NORM_EPS;
pub use tape::{BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;
