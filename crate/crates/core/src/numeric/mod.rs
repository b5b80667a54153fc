//! Dense `f64` tensors, a reverse-mode tape, and finite-difference checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{
    cholesky, first_argmax, invert, pairwise_sq_dist, sigmoid, softmax_rows, ElementwiseDerivative, Graph,
    Var,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
