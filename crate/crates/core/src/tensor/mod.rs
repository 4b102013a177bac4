//! Dense tensors and the reverse-mode autodiff tape.

mod conv;
mod gemm;
mod gradcheck;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{grad_check, numeric_grad};
pub use tape::{Axes, Tape, Var};
pub use tensor::Tensor;
