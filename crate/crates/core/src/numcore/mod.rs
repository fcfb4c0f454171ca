//! Dense matrices and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod matrix;

pub use gradcheck::{gradcheck, relative_error, GradCheckReport, DEFAULT_EPSILON};
pub use graph::{Binary, Graph, Unary, Var};
pub(crate) use graph::sigmoid_scalar;
pub use matrix::Matrix;
