//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! A [`Graph`] records every forward op together with the activations its
//! backward rule needs. [`Graph::backward`] sweeps the tape in reverse and
//! returns adjoints for every leaf; [`grad_check`] compares them with the
//! central-difference oracle.

mod gradcheck;
mod graph;
mod store;

pub use gradcheck::{composite_cases, grad_check, op_case, project, GradCheckReport, Mismatch, DEFAULT_TOLERANCE};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub(crate) use graph::{add_row_bias, div_rows, group_linear};
pub use store::{GradientStore, ParamSet};
