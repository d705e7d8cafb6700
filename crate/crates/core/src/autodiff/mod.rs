//! Dense-matrix reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, compare_with_finite_differences, finite_diff_check};
pub use tape::{GradientMap, NodeId, Tape, Var};
pub use tensor::Tensor;
