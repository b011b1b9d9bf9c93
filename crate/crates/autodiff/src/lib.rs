//! Minimal reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every primitive as it is evaluated (define-by-run) and
//! replays the record in reverse on [`Graph::backward`]. Graphs are built per
//! batch and discarded; parameters live outside the graph as plain [`Tensor`]s.

mod backward;
mod broadcast;
mod check;
mod error;
mod float;
mod graph;
mod tensor;

pub use check::{forward_backward, grad_check, grad_check_many, GradCheckReport};
pub use error::{AutodiffError, Result};
pub use float::{Float, Precision};
pub use graph::{Gradients, Graph, Var, CLAMP_EPS};
pub use tensor::Tensor;
