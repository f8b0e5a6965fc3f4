//! Tensors, the gradient tape and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{check_graph_op, finite_diff_check, merge_by_op, op_suite, GradCheckReport};
pub use graph::{sigmoid, smooth_l1, Gradients, Graph, Var};
pub use tensor::Tensor;
