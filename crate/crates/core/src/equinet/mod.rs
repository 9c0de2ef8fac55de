//! Rotation-equivariant point network: group convolutions over the 60
//! icosahedral rotations, invariant part segmentation, soft part pooling and
//! attention heads for per-part rotations and body shape.
//!
//! Every global rotation of the input by a group element acts on the
//! features as a permutation of the group axis, so part labels and shape
//! are invariant and decoded rotations are left-composed with that element.

mod geometry;
mod heads;
mod layers;
mod network;

pub use geometry::{
    ball_query, farthest_point_sampling, kernel_points, kernel_weight, normalize_cloud, GeometryPlan, Normalization,
    KERNEL_POINTS, NOMINAL_HEIGHT,
};
pub use heads::{decode_pose, pose_head, rotation_sums, self_attention, shape_head, PoseEstimate};
pub use layers::{group_pool, part_invariant, segment_parts, soft_aggregate, spconv_forward};
pub use network::{EquiNet, HeadLayout, Inference, NetOutputs, Prepared};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group60::GroupError;
use crate::microtensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquinetError {
    #[error("cloud has {got} points, need at least {need}")]
    TooFewPoints { got: usize, need: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub channels: usize,
    /// Ball-query radius in height-normalized units. Kernel points sit at half of it.
    pub kernel_radius: f64,
    pub stride: usize,
    pub neighbor_cap: usize,
    pub kernel_points: usize,
    pub heads: usize,
    pub embed: usize,
    pub pose_layers: usize,
    pub shape_layers: usize,
    pub parent_conditioning: bool,
    /// Hidden width of the segmentation and pose MLPs.
    pub hidden: usize,
    /// Per-part width fed to the shape MLP.
    pub shape_proj: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channels: 64,
            kernel_radius: 0.4,
            stride: 2,
            neighbor_cap: 32,
            kernel_points: KERNEL_POINTS,
            heads: 8,
            embed: 64,
            pose_layers: 2,
            shape_layers: 1,
            parent_conditioning: true,
            hidden: 64,
            shape_proj: 6,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), EquinetError> {
        let bad = |m: &str| Err(EquinetError::InvalidConfig(m.to_string()));
        if self.channels == 0 || self.stride == 0 || self.neighbor_cap == 0 || self.hidden == 0 || self.shape_proj == 0 {
            return bad("sizes must be positive");
        }
        if !(self.kernel_radius > 0.0 && self.kernel_radius.is_finite()) {
            return bad("kernel radius must be positive");
        }
        if self.kernel_points != KERNEL_POINTS {
            return bad("only the 13-point icosahedral kernel is supported");
        }
        if self.heads == 0 || self.embed == 0 || self.embed % self.heads != 0 {
            return bad("embedding width must be a positive multiple of the head count");
        }
        if self.pose_layers == 0 || self.shape_layers == 0 {
            return bad("at least one attention layer per head is required");
        }
        Ok(())
    }
}
