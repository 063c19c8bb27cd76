//! Dense tensors and tape-based reverse-mode autodiff.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_diff, grad_check, max_rel_err};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
