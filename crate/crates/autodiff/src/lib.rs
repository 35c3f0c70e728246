// SPDX-License-Identifier: Apache-2.0

//! Minimal dense-tensor numerics with reverse-mode automatic
//! differentiation.
//!
//! All values are `f64`. A [`Graph`] records operations as they execute;
//! [`Graph::backward`] walks the records in reverse. Any non-finite value
//! produced by an operation is reported as an error at that operation.

mod check;
mod error;
mod graph;
mod tensor;

pub use check::{
    analytic_grad, check_ops, finite_diff_check, fixture, op_cases, relative_error, weighted_sum,
    OpCase, DEFAULT_FD_EPS,
};
pub use error::{Result, TensorError};
pub use graph::{ElementwiseOp, Graph, ReduceOp, Var, GATHER_ZERO};
pub use tensor::Tensor;
