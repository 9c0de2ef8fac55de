//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Storage is generic over [`Real`] so the same graph code trains in `f32`
//! and is gradient-checked in `f64`. Reductions accumulate in `f64`.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod real;
mod sparse;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_directional, grad_check_params, relative_error};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use real::Real;
pub use sparse::{Csr, CsrBuilder};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    UnknownAxis { op: &'static str, axis: usize, rank: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("graph already consumed by backward")]
    GraphConsumed,
    #[error("{op}: index {index} out of range {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint group hash does not match the current rotation group")]
    HashMismatch,
}
