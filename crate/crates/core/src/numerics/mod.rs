//! Dense tensor math, reverse-mode differentiation, and Adam.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamState, ParamStore};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{log_softmax, log_softmax_vec, log_sum_exp, matmul, Tensor};
