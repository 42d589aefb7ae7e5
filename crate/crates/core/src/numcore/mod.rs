//! Dense matrices and tape-based reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, PROB_EPS};
pub use tensor::{bce_with_logits, sigmoid, softmax_vec, Tensor2};
