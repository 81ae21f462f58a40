//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a define-by-run tape: ops evaluate eagerly and record a
//! closure computing their vector-Jacobian product. Parameters live outside
//! the tape in a [`ParamStore`], so a fresh graph is built for every forward
//! pass while weights and optimizer state persist.

mod adam;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use adam::{adam_minimize, AdamState};
pub use gradcheck::{check_gradients, finite_diff_check, GradCheck};
pub use graph::{GradSink, Gradients, Graph, Var};
pub use ops::{maxpool_with_indices, sigmoid, softplus, Activation, Padding};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
