//! Define-by-run reverse-mode differentiation and its finite-difference
//! checker.

pub mod gradcheck;
mod graph;
mod params;

pub use graph::{push_cells, Backward, Grads, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
