//! Dense tensors, recorded operations with reverse-mode gradients, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod norm;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub(crate) use graph::{conv_out, sigmoid_scalar};
pub use graph::{softmax_rows, Graph, Var};
pub use norm::{NormState, NORM_EPS, NORM_MOMENTUM};
pub use tensor::Tensor;
