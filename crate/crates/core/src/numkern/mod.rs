//! Dense matrix kernels and the reverse-mode differentiation engine.

mod fd;
mod matrix;
mod tape;

pub use fd::{fd_gradient, max_relative_error};
pub use matrix::{matmul, sigmoid, softmax, Matrix};
pub use tape::{Tape, Var};
