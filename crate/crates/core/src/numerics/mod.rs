//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
