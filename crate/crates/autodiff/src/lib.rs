//! Reverse-mode automatic differentiation over dense, row-major `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents were
//! created earlier, so node order is always a valid topological order and
//! [`Graph::backward`] is a single reverse sweep. Tensors are at most
//! two-dimensional in practice; "row" operations (softmax, layer norm, gather)
//! act on the last axis.
//!
//! Leaves created with [`Graph::param`] track gradients; leaves created with
//! [`Graph::constant`] do not, and any subgraph that depends only on constants
//! is skipped during the backward sweep.

mod error;
mod graph;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, NodeId};
