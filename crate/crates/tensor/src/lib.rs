//! Reverse-mode automatic differentiation on dense `ndarray` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar root with respect to every leaf. All numerics are generic over
//! [`Element`], implemented for `f32` and `f64`.
//!
//! Learnable state lives outside the graph in a [`ParamStore`]; a [`Session`]
//! binds a store to a graph for one forward/backward pass.

mod element;
mod graph;
mod ops;
mod optim;
mod params;

pub mod gradcheck;
pub mod init;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::Conv2dSpec;
pub use ops::norm::BatchNormStats;
pub use ops::sum_to_shape;
pub use optim::{Adam, AdamConfig, LinearDecay};
pub use params::{BnUpdate, Mode, ParamId, ParamStore, Session};

pub use ndarray;

/// Errors raised by tensor-level operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
