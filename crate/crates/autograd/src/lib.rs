//! A compact reverse-mode automatic differentiation engine over dense `f32`
//! tensors in NCHW layout.
//!
//! Backward rules are built from differentiable ops, so [`grad`] with
//! `create_graph = true` returns gradients that can themselves be
//! back-propagated (needed for gradient penalties).

pub mod check;
pub mod graph;
pub mod nn;
mod ops;
pub mod optim;
pub mod tensor;

pub use graph::{grad, grad_enabled, no_grad, with_grad_mode, Gradients, Var};
pub use nn::{Ctx, Module, Param};
pub use optim::Adam;
pub use tensor::{ConvGeom, Tensor};
