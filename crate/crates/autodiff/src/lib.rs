//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything runs in `f64` on the CPU. A [`Graph`] records operations as
//! they are evaluated; [`Graph::backward`] walks the tape once in reverse.
//! Parameters live in a [`ParamStore`] and are bound into a fresh graph for
//! each step, then updated by [`AdamState::step`].

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use adam::AdamState;
pub use error::{AutodiffError, Result};
pub use graph::{Graph, Var};
pub use params::{Bound, Grads, Param, ParamStore};
pub use tensor::Tensor;
