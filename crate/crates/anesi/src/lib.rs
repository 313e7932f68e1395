//! Neural approximate inference for weighted model counting.
//!
//! A perception network maps raw inputs to beliefs over discrete worlds, a
//! symbolic function maps worlds to structured outputs, and autoregressive
//! inference networks learn to answer queries about the symbolic function
//! under the belief distribution. Training never differentiates through the
//! symbolic function: inference networks are fitted on samples drawn from a
//! Dirichlet belief prior, and the perception network is trained through the
//! prediction network alone.

pub mod gradest;
pub mod infer;
pub mod ndauto;
pub mod prior;
pub mod problem;
pub mod pruners;
pub mod tasks;
pub mod train;

pub use ndauto::AutoError;
pub use problem::ProblemError;
