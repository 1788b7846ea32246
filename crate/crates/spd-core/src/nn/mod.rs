//! Minimal reverse-mode differentiation engine over `f64` tensors.
//!
//! Everything is deterministic: kernels are sequential with fixed reduction
//! order, so identical inputs and parameters reproduce identical outputs and
//! gradients bit for bit. Double precision keeps finite-difference gradient
//! checks meaningful.

pub mod graph;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Node};
pub use optim::{Adam, AdamParams};
pub use params::ParamStore;
