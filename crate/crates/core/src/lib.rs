//! Black-box energy-robustness testing for adaptive neural networks.
//!
//! The crate trains small gated (conditional-skipping) and early-exit
//! networks, simulates their step-wise inference energy, learns an energy
//! estimator from measurements alone, and generates energy-surging test
//! inputs against it. Metrics and two detection defenses close the loop.

pub mod adnn;
pub mod corruptions;
pub mod dataset;
pub mod defense;
pub mod energy;
pub mod error;
pub mod estimator;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod testgen;

pub use error::{Error, Result};
pub use graph::{Axis, Graph, NodeId};
pub use tensor::Tensor;
