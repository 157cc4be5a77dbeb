//! Dense tensors and a reverse-mode tape, generic over the float type.

mod gradcheck;
pub mod kernels;
pub mod nn;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
