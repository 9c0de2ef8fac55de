//! A procedural articulated body with SMPL's structure: template mesh,
//! linear shape and pose-corrective bases, a joint regressor, and linear
//! blend skinning over a kinematic tree.

mod dataset;
mod diff;
mod model;
mod sample;
mod toy;
mod tree;

pub use dataset::{
    decode_dataset, encode_dataset, peek_body_config, read_dataset, write_dataset, write_obj, Dataset, DatasetHeader,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use diff::LbsOperators;
pub use model::{BodyModel, BodyParams, Kinematics, Posed, MARKER_WEIGHT};
pub use sample::{merge_parts, sample_point_cloud, vertex_normals, PartMap, SampleRecord, DEFAULT_NOISE, DENSITY_SIGMA};
pub use toy::{build_toy_body, BodyConfig, MAX_BETAS, RING_SIDES};
pub use tree::KinematicTree;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("invalid kinematic tree: {0}")]
    InvalidTree(String),
    #[error("invalid body configuration: {0}")]
    InvalidConfig(String),
    #[error("body model invariant violated: {0}")]
    InvalidModel(String),
    #[error("vertex budget {budget} too small, need at least {needed}")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("expected {expected} shape coefficients, got {got}")]
    BetaLength { expected: usize, got: usize },
    #[error("expected {expected} joint rotations, got {got}")]
    ThetaLength { expected: usize, got: usize },
    #[error("mesh has no area to sample from")]
    DegenerateMesh,
    #[error("label {0} has no entry in the part map")]
    UnmappedLabel(usize),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
