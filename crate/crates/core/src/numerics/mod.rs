//! Differentiable tensor substrate: dense tensors, the operation tape with
//! reverse-mode gradients, and the finite-difference oracle used to audit it.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, max_rel_error};
pub use tape::{BlendTable, LookbackNumerator, Tape, TensorId};
pub use tensor::{DType, Scalar, Tensor};
