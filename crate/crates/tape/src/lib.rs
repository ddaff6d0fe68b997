//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass and
//! replays them backwards from a scalar loss. Learnable weights live in a
//! [`ParamStore`]; binding a parameter into a graph copies its value into a
//! leaf node and [`Grads::for_store`] collects the gradients back out.
//!
//! Everything here is deterministic: no operation depends on thread timing or
//! hash iteration order, so identical inputs give bit-identical outputs.

mod graph;
mod matrix;
pub mod nn;
pub mod optim;
mod params;

pub use graph::{sigmoid, Grads, Graph, Var};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore, StoreGrads};
