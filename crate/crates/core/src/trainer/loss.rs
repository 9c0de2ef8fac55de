use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::bodymodel::{BodyModel, LbsOperators, SampleRecord};
use crate::microtensor::{Graph, Real, Tensor, Var};

/// Weights of the five loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub pose: f64,
    pub shape: f64,
    pub verts: f64,
    pub joints: f64,
    pub part: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pose: 5.0, shape: 50.0, verts: 100.0, joints: 100.0, part: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.pose, self.shape, self.verts, self.joints, self.part];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub pose: f64,
    pub shape: f64,
    pub verts: f64,
    pub joints: f64,
    pub part: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.pose += s * o.pose;
        self.shape += s * o.shape;
        self.verts += s * o.verts;
        self.joints += s * o.joints;
        self.part += s * o.part;
        self.total += s * o.total;
    }
}

/// Network outputs the loss reads.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    /// `[N, P]` segmentation logits.
    pub logits: Var,
    /// `[K, 3, 3]` unprojected rotation sums.
    pub rot_sums: Var,
    /// `[|β|]`
    pub beta: Var,
}

/// Graph handles of the individual terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub pose: Var,
    pub shape: Var,
    pub verts: Var,
    pub joints: Var,
    pub part: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Var| g.value(x).data()[0].to_f64();
        LossTerms {
            pose: v(self.pose),
            shape: v(self.shape),
            verts: v(self.verts),
            joints: v(self.joints),
            part: v(self.part),
            total: v(self.total),
        }
    }
}

/// Body-model operators shared by every loss evaluation.
pub struct LossContext<T> {
    lbs: LbsOperators<T>,
    vertex_weights: Vec<f64>,
    joints: usize,
    betas: usize,
}

impl<T: Real> LossContext<T> {
    pub fn new(model: &BodyModel) -> Self {
        LossContext {
            lbs: LbsOperators::new(model),
            vertex_weights: model.vertex_weights(),
            joints: model.num_joints(),
            betas: model.num_betas(),
        }
    }

    /// `λ1·L_pose + λ2·L_shape + λ3·L_verts + λ4·L_joint + λ5·L_part`.
    ///
    /// `L_pose` is the mean over joints of the squared Frobenius distance
    /// between rotation sums and ground-truth global rotations. The
    /// predicted body is posed with the rotation sums and translated so its
    /// root joint sits on the ground-truth root, which isolates pose and
    /// shape from the translation estimate. Marker vertices weigh double.
    pub fn total_loss(
        &self,
        g: &mut Graph<T>,
        pred: &LossInputs,
        record: &SampleRecord,
        lambda: &LossWeights,
    ) -> Result<LossVars, TrainError> {
        let k = self.joints;
        if record.gt_global_rots.len() != k || record.gt_params.beta.len() != self.betas {
            return Err(TrainError::Shape("record does not match the body model".into()));
        }
        let flat = |pts: &[nalgebra::Vector3<f64>]| pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();

        let gt_rots: Vec<f64> = record.gt_global_rots.iter().flat_map(|r| r.to_row_major()).collect();
        let gt_rots = g.constant(Tensor::from_f64(&[k, 3, 3], &gt_rots)?)?;
        let pose = g.mse_loss(pred.rot_sums, gt_rots)?;
        let pose = g.scale(pose, 9.0)?;

        let gt_beta = g.constant(Tensor::from_f64(&[self.betas], &record.gt_params.beta)?)?;
        let shape = g.mse_loss(pred.beta, gt_beta)?;

        let (verts, joints) = self.lbs.forward(g, pred.beta, pred.rot_sums, &nalgebra::Vector3::zeros())?;
        let root = g.gather_rows(joints, &[0])?;
        let root = g.reshape(root, &[3])?;
        let gt_root = record.gt_joints[0];
        let gt_root = g.constant(Tensor::from_f64(&[3], &[gt_root.x, gt_root.y, gt_root.z])?)?;
        let shift = g.sub(gt_root, root)?;
        let verts = g.add(verts, shift)?;
        let joints = g.add(joints, shift)?;

        let gt_v = g.constant(Tensor::from_f64(&[record.gt_vertices.len(), 3], &flat(&record.gt_vertices))?)?;
        let verts = g.weighted_mse_loss(verts, gt_v, &self.vertex_weights)?;
        let gt_j = g.constant(Tensor::from_f64(&[k, 3], &flat(&record.gt_joints))?)?;
        let joints = g.mse_loss(joints, gt_j)?;

        let part = g.cross_entropy_loss(pred.logits, &record.labels)?;

        let mut total = g.scale(pose, lambda.pose)?;
        for (term, w) in [(shape, lambda.shape), (verts, lambda.verts), (joints, lambda.joints), (part, lambda.part)] {
            let t = g.scale(term, w)?;
            total = g.add(total, t)?;
        }
        Ok(LossVars { pose, shape, verts, joints, part, total })
    }
}
