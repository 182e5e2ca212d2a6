//! Dense 2-D tensors with a reverse-mode gradient tape.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{sigmoid, BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;
