//! Dense tensors with reverse-mode gradients.

mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Graph, Var};
