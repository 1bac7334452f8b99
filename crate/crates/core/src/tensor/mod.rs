//! Dense tensors and a small reverse-mode autodiff tape.

mod dense;
mod graph;
pub mod gradcheck;
pub mod io;
mod params;
mod real;

pub use dense::Tensor;
pub use gradcheck::{compare_grads, finite_diff_grad, relative_error, GradComparison};
pub use graph::{Graph, RowReduce, Var, PROB_FLOOR};
pub use params::ParamStore;
pub use real::Real;
