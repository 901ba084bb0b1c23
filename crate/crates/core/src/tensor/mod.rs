//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable-by-convention row-major `f64` array; [`Graph`]
//! records operations on tensors and replays them backwards to compute
//! gradients. Every op checks shapes explicitly: there is no implicit
//! broadcasting beyond scalar scaling, and bias-style additions go through
//! [`Graph::add_bias`] with a named axis.
//!
//! `relu` uses the subgradient 0 at exactly 0.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod value;

pub use gradcheck::grad_check;
pub use graph::{Graph, Padding, Var, MIN_NORM};
pub use value::Tensor;

#[cfg(test)]
mod tests;
