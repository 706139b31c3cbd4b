//! Minimal reverse-mode differentiation engine: tensors, a recording tape
//! with the operations the matching network uses, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use graph::{masked_softmax_values, positive_probability, Gradients, Graph, Var};
pub use tensor::{ordered_sum, Scalar, Tensor};
