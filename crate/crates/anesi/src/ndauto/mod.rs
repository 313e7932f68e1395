//! Minimal reverse-mode autodiff: tensors, a define-by-run tape, MLPs, Adam,
//! and checkpoint serialization. Everything is `f64` and single-threaded so
//! runs are bit-reproducible under a fixed seed.

pub mod checkpoint;
pub mod kernels;
mod net;
mod optim;
mod tape;
mod tensor;

pub use net::{init_mlp_params, init_mlp_zeros, mlp_forward, mlp_logits, mlp_logits_direct, Head, MlpSpec};
pub use optim::{ParamBinding, ParamStore};
pub use tape::{finite_diff, Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub use kernels::{softplus, softplus_inv};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutoError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("mask leaves no admissible option")]
    DeadBranch,
}
