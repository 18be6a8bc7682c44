//! Minimal n-dimensional arrays with tape-based reverse-mode differentiation.

mod array;
pub mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use array::Tensor;
pub use gradcheck::{check_gradient, GradReport, ParamGradStats};
pub use kernels::{conv_out_len, layer_norm, softmax_rows};
pub use tape::{Gradients, Tape, Var};
