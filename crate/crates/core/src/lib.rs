//! Hybrid AC power flow: reference solvers, a graph surrogate trained with a
//! physics-informed loss, and partitioned linear refinement of its output.

pub mod network;
pub mod solver;
pub mod sparse;
pub mod metrics;
pub mod refine;
pub mod autodiff;
pub mod data;
pub mod model;
pub mod loss;
pub mod train;
pub mod harness;
