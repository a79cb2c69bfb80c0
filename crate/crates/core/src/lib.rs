//! Neural ODE super-resolution toolkit.
//!
//! Convolutional vector fields are integrated with an adaptive Dormand–Prince
//! solver and trained through one of three gradient backends: the continuous
//! adjoint, discrete reverse accumulation through the solver, or checkpointed
//! recomputation of each accepted step.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod sensitivity;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Shape, Tensor};
