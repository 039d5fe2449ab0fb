//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward op in execution order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Values
//! are viewed as matrices: the last axis is the column axis and all leading
//! axes are folded into rows. Parameters live outside the graph in a
//! [`ParamStore`]; gradients are copied back into the store after backward.

mod adam;
mod attention;
pub mod check;
mod graph;
mod params;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig, InverseSqrtSchedule};
pub use attention::{AttnLayout, CopyLayout};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
