use nalgebra::Vector3;

use crate::bodymodel::KinematicTree;
use crate::group60::{chordal_weighted_mean, GroupWeights, Rotation, RotationGroup};
use crate::microtensor::{Graph, ParamStore, Real, Tensor, TensorError, Var};

use super::layers::dense;
use super::network::HeadLayout;
use super::{EquinetError, NetworkConfig};

/// Multi-head self-attention over the second-to-last axis of `x`
/// (`[.., T, w] -> [.., T, width]`). No positional terms, so permuting the
/// tokens permutes the output. The input is added back as a residual,
/// through a learned projection when its width differs.
pub fn self_attention<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, TensorError> {
    let rank = g.shape(x).len();
    let in_width = g.shape(x)[rank - 1];
    let mut outs = Vec::with_capacity(heads);
    let mut head_dim = 0;
    for h in 0..heads {
        let wq = g.param(params, &format!("{prefix}.h{h}.q"))?;
        let wk = g.param(params, &format!("{prefix}.h{h}.k"))?;
        let wv = g.param(params, &format!("{prefix}.h{h}.v"))?;
        head_dim = g.shape(wq)[1];
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (head_dim as f64).sqrt())?;
        let a = g.softmax(s, rank - 1)?;
        outs.push(g.matmul(a, v)?);
    }
    let cat = g.concat(&outs, rank - 1)?;
    let y = dense(g, params, cat, &format!("{prefix}.out"), false)?;
    let skip = if in_width == heads * head_dim {
        x
    } else {
        let w = g.param(params, &format!("{prefix}.skip"))?;
        g.matmul(x, w)?
    };
    g.add(y, skip)
}

/// Per-joint attention over the group axis. Returns the softmax weights
/// `[K, M]` over group elements.
pub fn pose_head<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    h: Var,
    layout: &HeadLayout,
    cfg: &NetworkConfig,
) -> Result<Var, TensorError> {
    let own = g.gather_rows(h, &layout.joint_part)?;
    let mut x = if cfg.parent_conditioning {
        let parent = g.gather_rows(h, &layout.parent_part())?;
        g.concat(&[own, parent], 2)?
    } else {
        own
    };
    for l in 0..cfg.pose_layers {
        x = self_attention(g, params, &format!("pose.attn{l}"), x, cfg.heads)?;
    }
    let x = dense(g, params, x, "pose.mlp1", true)?;
    let x = dense(g, params, x, "pose.mlp2", true)?;
    let logits = dense(g, params, x, "pose.mlp3", false)?;
    let (k, m) = (g.shape(logits)[0], g.shape(logits)[1]);
    let logits = g.reshape(logits, &[k, m])?;
    g.softmax(logits, 1)
}

/// Unprojected weighted rotation sums `A_k = Σ_j w_kj R(g_j)`, `[K, 3, 3]`.
pub fn rotation_sums<T: Real>(g: &mut Graph<T>, group: &RotationGroup, weights: &Var) -> Result<Var, TensorError> {
    let mats: Vec<f64> = group.elements().iter().flat_map(|r| r.to_row_major()).collect();
    let basis = g.constant(Tensor::from_f64(&[group.len(), 9], &mats)?)?;
    let a = g.matmul(*weights, basis)?;
    let k = g.shape(a)[0];
    g.reshape(a, &[k, 3, 3])
}

/// Attention across part tokens, a shared per-part projection, then an MLP
/// on the flattened result. `hbar` is `[P, C]`; output `[betas]`.
pub fn shape_head<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    hbar: Var,
    cfg: &NetworkConfig,
) -> Result<Var, TensorError> {
    let mut x = hbar;
    for l in 0..cfg.shape_layers {
        x = self_attention(g, params, &format!("shape.attn{l}"), x, cfg.heads)?;
    }
    let p = g.shape(x)[0];
    let x = dense(g, params, x, "shape.proj", false)?;
    let x = g.reshape(x, &[1, p * cfg.shape_proj])?;
    let x = dense(g, params, x, "shape.mlp1", true)?;
    let beta = dense(g, params, x, "shape.mlp2", false)?;
    let nb = g.shape(beta)[1];
    g.reshape(beta, &[nb])
}

/// Decoded network output for one cloud.
#[derive(Clone, Debug)]
pub struct PoseEstimate {
    /// Rest-to-posed rotation of every joint.
    pub global_rots: Vec<Rotation>,
    pub weights: Vec<GroupWeights>,
    pub local_rots: Vec<Rotation>,
    pub beta_hat: Vec<f64>,
    /// Root translation estimate: the cloud centroid.
    pub translation: Vector3<f64>,
}

/// Chordal means of the weight rows, plus the derived local rotations.
pub fn decode_pose(
    group: &RotationGroup,
    tree: &KinematicTree,
    weights: &[f64],
    beta_hat: Vec<f64>,
    translation: Vector3<f64>,
) -> Result<PoseEstimate, EquinetError> {
    let m = group.len();
    if weights.len() != tree.len() * m {
        return Err(EquinetError::Shape(format!("{} weights for {} joints", weights.len(), tree.len())));
    }
    let mut rows = Vec::with_capacity(tree.len());
    let mut global = Vec::with_capacity(tree.len());
    for row in weights.chunks(m) {
        let w = GroupWeights::new(row.to_vec())?;
        global.push(chordal_weighted_mean(group, &w)?);
        rows.push(w);
    }
    let local = tree.local_from_global(&global);
    Ok(PoseEstimate { global_rots: global, weights: rows, local_rots: local, beta_hat, translation })
}
