//! The icosahedral discretization of SO(3).
//!
//! Rotating an input by one of the 60 group elements acts on any
//! group-indexed quantity as a permutation of that index. Everything
//! downstream that claims equivariance relies on the tables built here.

mod average;
mod group;
mod rotation;
mod serial;

pub use average::{chordal_weighted_mean, project_to_so3, weighted_sum, GroupWeights, DEGENERACY_RATIO};
pub use group::{build_icosahedral_group, RotationGroup, GROUP_ORDER};
pub use rotation::{angular_distance, Rotation, ROTATION_TOL};
pub use serial::{decode_group, decode_group_unchecked, encode_group, group_hash, GROUP_MAGIC};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("matrix is not a rotation (orthogonality error {ortho_err:.3e}, det {det})")]
    NotARotation { ortho_err: f64, det: f64 },
    #[error("group element index {index} out of range for group of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("chordal mean is not unique (singular values {singular_values:?})")]
    DegenerateMean { singular_values: [f64; 3] },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("non-finite matrix entries")]
    NonFinite,
    #[error("malformed group data: {0}")]
    Malformed(String),
    #[error("group invariant violated: {0}")]
    Invariant(String),
}
