use std::sync::Arc;

use nalgebra::Vector3;

use super::model::BodyModel;
use crate::microtensor::{Csr, Graph, Real, Tensor, TensorError, Var};

/// Constant operators for evaluating the body model inside a [`Graph`],
/// differentiably in `β` and in per-part global rotation matrices.
///
/// The rotations need not be orthonormal, so training losses can use the
/// unprojected weighted rotation sums directly.
pub struct LbsOperators<T> {
    template: Tensor<T>,
    shape_dirs: Tensor<T>,
    pose_dirs: Option<(Tensor<T>, Tensor<T>)>,
    regressor: Arc<Csr>,
    skinning: Arc<Csr>,
    /// `[K, K−1]`: entry `(k, c−1)` is 1 when joint `c ≥ 1` lies on the path to `k`.
    path: Arc<Csr>,
    parents: Vec<usize>,
    children: Vec<usize>,
    n_vertices: usize,
    n_joints: usize,
    n_betas: usize,
}

impl<T: Real> LbsOperators<T> {
    pub fn new(model: &BodyModel) -> Self {
        let (v, k, nb) = (model.num_vertices(), model.num_joints(), model.num_betas());
        let template = Tensor::from_f64(&[v, 3], &model.template().iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>())
            .expect("template shape");
        let shape_dirs = Tensor::from_f64(&[v * 3, nb], model.shape_dirs()).expect("shape basis");
        let np = 9 * (k - 1);
        let pose_dirs = model.has_pose_correctives().then(|| {
            let ident: Vec<f64> = (0..np).map(|e| if (e % 9) % 4 == 0 { 1.0 } else { 0.0 }).collect();
            (
                Tensor::from_f64(&[v * 3, np], model.pose_dirs()).expect("pose basis"),
                Tensor::from_f64(&[np], &ident).expect("identity"),
            )
        });
        let tree = model.tree();
        let path_rows: Vec<Vec<(usize, f64)>> =
            (0..k).map(|j| tree.path_to(j).into_iter().filter(|&c| c >= 1).map(|c| (c - 1, 1.0)).collect()).collect();
        LbsOperators {
            template,
            shape_dirs,
            pose_dirs,
            regressor: Arc::new(model.joint_regressor().clone()),
            skinning: Arc::new(model.skinning().clone()),
            path: Arc::new(Csr::from_rows(k.saturating_sub(1).max(1), &path_rows)),
            parents: (1..k).map(|j| tree.parent(j).expect("non-root")).collect(),
            children: (1..k).collect(),
            n_vertices: v,
            n_joints: k,
            n_betas: nb,
        }
    }

    /// Posed vertices `[V, 3]` and joints `[K, 3]` from `beta` (`[|β|]`) and
    /// global rotations `rots` (`[K, 3, 3]`), with a fixed root translation.
    pub fn forward(&self, g: &mut Graph<T>, beta: Var, rots: Var, trans: &Vector3<f64>) -> Result<(Var, Var), TensorError> {
        let (v, k, nb) = (self.n_vertices, self.n_joints, self.n_betas);
        if g.shape(beta) != [nb] || g.shape(rots) != [k, 3, 3] {
            return Err(TensorError::ShapeMismatch { op: "lbs", lhs: g.shape(beta).to_vec(), rhs: g.shape(rots).to_vec() });
        }
        let template = g.constant(self.template.clone())?;
        let basis = g.constant(self.shape_dirs.clone())?;
        let beta_col = g.reshape(beta, &[nb, 1])?;
        let offsets = g.matmul(basis, beta_col)?;
        let offsets = g.reshape(offsets, &[v, 3])?;
        let shaped = g.add(template, offsets)?;

        let rest = match &self.pose_dirs {
            Some((dirs, ident)) if k > 1 => {
                let parent_rots = g.gather_rows(rots, &self.parents)?;
                let parent_t = g.transpose(parent_rots)?;
                let child_rots = g.gather_rows(rots, &self.children)?;
                let local = g.matmul(parent_t, child_rots)?;
                let feat = g.reshape(local, &[9 * (k - 1)])?;
                let ident = g.constant(ident.clone())?;
                let feat = g.sub(feat, ident)?;
                let feat = g.reshape(feat, &[9 * (k - 1), 1])?;
                let dirs = g.constant(dirs.clone())?;
                let corr = g.matmul(dirs, feat)?;
                let corr = g.reshape(corr, &[v, 3])?;
                g.add(shaped, corr)?
            }
            _ => shaped,
        };

        let joints_rest = g.spmm(self.regressor.clone(), shaped)?;
        let root = g.gather_rows(joints_rest, &vec![0; k])?;
        let tr = g.constant(Tensor::from_f64(&[3], &[trans.x, trans.y, trans.z])?)?;
        let mut posed_joints = g.add(root, tr)?;
        if k > 1 {
            let jc = g.gather_rows(joints_rest, &self.children)?;
            let jp = g.gather_rows(joints_rest, &self.parents)?;
            let bones = g.sub(jc, jp)?;
            let bones = g.reshape(bones, &[k - 1, 3, 1])?;
            let parent_rots = g.gather_rows(rots, &self.parents)?;
            let turned = g.matmul(parent_rots, bones)?;
            let turned = g.reshape(turned, &[k - 1, 3])?;
            let offsets = g.spmm(self.path.clone(), turned)?;
            posed_joints = g.add(posed_joints, offsets)?;
        }

        // Per-part translations t_k = p_k − G_k J_k.
        let jcol = g.reshape(joints_rest, &[k, 3, 1])?;
        let rj = g.matmul(rots, jcol)?;
        let rj = g.reshape(rj, &[k, 3])?;
        let tk = g.sub(posed_joints, rj)?;

        let flat_rots = g.reshape(rots, &[k, 9])?;
        let blended = g.spmm(self.skinning.clone(), flat_rots)?;
        let blended = g.reshape(blended, &[v, 3, 3])?;
        let xcol = g.reshape(rest, &[v, 3, 1])?;
        let moved = g.matmul(blended, xcol)?;
        let moved = g.reshape(moved, &[v, 3])?;
        let shift = g.spmm(self.skinning.clone(), tk)?;
        let verts = g.add(moved, shift)?;
        Ok((verts, posed_joints))
    }
}
