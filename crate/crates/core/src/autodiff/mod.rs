//! Tape-based reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.

mod gemm;
mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_many, gradcheck_sampled};
pub use tape::{CustomVjp, Gradients, SoftmaxRecord, Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::{log_sigmoid, sigmoid};

#[cfg(test)]
mod tests;
