use nalgebra::{Matrix3, Matrix4, Vector3};

use super::toy::BodyConfig;
use super::tree::KinematicTree;
use super::BodyError;
use crate::group60::Rotation;
use crate::microtensor::Csr;

type V3 = Vector3<f64>;

/// Weight of marker vertices in the vertex loss.
pub const MARKER_WEIGHT: f64 = 2.0;

/// Shape coefficients, per-joint local rotations and root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    pub theta: Vec<Rotation>,
    pub trans: V3,
}

impl BodyParams {
    /// Mean shape, identity pose, no translation.
    pub fn rest(model: &BodyModel) -> Self {
        BodyParams {
            beta: vec![0.0; model.num_betas()],
            theta: vec![Rotation::identity(); model.num_joints()],
            trans: V3::zeros(),
        }
    }

    fn check(&self, model: &BodyModel) -> Result<(), BodyError> {
        if self.beta.len() != model.num_betas() {
            return Err(BodyError::BetaLength { expected: model.num_betas(), got: self.beta.len() });
        }
        if self.theta.len() != model.num_joints() {
            return Err(BodyError::ThetaLength { expected: model.num_joints(), got: self.theta.len() });
        }
        Ok(())
    }
}

/// Output of forward kinematics.
#[derive(Clone, Debug)]
pub struct Kinematics {
    /// Rest-to-posed rotation of each part.
    pub global_rots: Vec<Rotation>,
    /// Homogeneous rest-to-posed transform of each part.
    pub transforms: Vec<Matrix4<f64>>,
    /// Posed joint positions.
    pub joints: Vec<V3>,
    /// Joint positions of the shaped rest mesh, `J(β)`.
    pub rest_joints: Vec<V3>,
}

/// A posed body.
#[derive(Clone, Debug)]
pub struct Posed {
    pub vertices: Vec<V3>,
    pub joints: Vec<V3>,
    pub global_rots: Vec<Rotation>,
}

/// Template mesh with linear shape and pose-corrective bases, a joint
/// regressor and skinning weights over a kinematic tree.
#[derive(Clone, Debug)]
pub struct BodyModel {
    config: BodyConfig,
    tree: KinematicTree,
    template: Vec<V3>,
    /// `[V·3, |β|]` row-major.
    shape_dirs: Vec<f64>,
    /// `[V·3, 9·(K−1)]` row-major.
    pose_dirs: Vec<f64>,
    joint_regressor: Csr,
    skinning: Csr,
    faces: Vec<[usize; 3]>,
    markers: Vec<usize>,
    skeleton: Vec<V3>,
}

impl BodyModel {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: BodyConfig,
        tree: KinematicTree,
        template: Vec<V3>,
        shape_dirs: Vec<f64>,
        pose_dirs: Vec<f64>,
        joint_regressor: Csr,
        skinning: Csr,
        faces: Vec<[usize; 3]>,
        markers: Vec<usize>,
        skeleton: Vec<V3>,
    ) -> Result<Self, BodyError> {
        let m = BodyModel {
            config,
            tree,
            template,
            shape_dirs,
            pose_dirs,
            joint_regressor,
            skinning,
            faces,
            markers,
            skeleton,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<(), BodyError> {
        let (v, k, nb) = (self.num_vertices(), self.num_joints(), self.num_betas());
        let bad = |msg: String| Err(BodyError::InvalidModel(msg));
        if self.shape_dirs.len() != v * 3 * nb || self.pose_dirs.len() != v * 3 * 9 * (k - 1) {
            return bad("basis sizes do not match the template".into());
        }
        if self.skinning.rows() != v || self.skinning.cols() != k {
            return bad("skinning matrix must be V×K".into());
        }
        if self.joint_regressor.rows() != k || self.joint_regressor.cols() != v {
            return bad("joint regressor must be K×V".into());
        }
        for (name, m) in [("skinning", &self.skinning), ("joint regressor", &self.joint_regressor)] {
            for r in 0..m.rows() {
                let mut sum = 0.0;
                let mut nz = 0;
                for (_, w) in m.row(r) {
                    if w < 0.0 {
                        return bad(format!("{name} row {r} has a negative weight"));
                    }
                    sum += w;
                    nz += (w != 0.0) as usize;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return bad(format!("{name} row {r} sums to {sum}"));
                }
                if name == "skinning" && nz > 4 {
                    return bad(format!("vertex {r} has {nz} skinning weights"));
                }
            }
        }
        for s in 0..nb {
            let mut mean = [0.0; 3];
            for vi in 0..v {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += self.shape_dirs[(vi * 3 + c) * nb + s];
                }
            }
            if mean.iter().any(|m| (m / v as f64).abs() > 1e-9) {
                return bad(format!("shape direction {s} is not mean-centred"));
            }
        }
        if self.faces.iter().flatten().any(|&i| i >= v) || self.markers.iter().any(|&i| i >= v) {
            return bad("face or marker index out of range".into());
        }
        Ok(())
    }

    pub fn config(&self) -> &BodyConfig {
        &self.config
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.tree
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_joints(&self) -> usize {
        self.tree.len()
    }

    pub fn num_betas(&self) -> usize {
        self.config.betas
    }

    pub fn template(&self) -> &[V3] {
        &self.template
    }

    pub fn shape_dirs(&self) -> &[f64] {
        &self.shape_dirs
    }

    pub fn pose_dirs(&self) -> &[f64] {
        &self.pose_dirs
    }

    pub fn has_pose_correctives(&self) -> bool {
        self.pose_dirs.iter().any(|&v| v != 0.0)
    }

    pub fn joint_regressor(&self) -> &Csr {
        &self.joint_regressor
    }

    pub fn skinning(&self) -> &Csr {
        &self.skinning
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn markers(&self) -> &[usize] {
        &self.markers
    }

    /// Joint positions of the procedural skeleton the mesh was built around.
    pub fn skeleton_joints(&self) -> &[V3] {
        &self.skeleton
    }

    /// Per-vertex loss weights: [`MARKER_WEIGHT`] on markers, 1 elsewhere.
    pub fn vertex_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.num_vertices()];
        for &m in &self.markers {
            w[m] = MARKER_WEIGHT;
        }
        w
    }

    /// Joint with the largest skinning weight at each vertex (smallest index on ties).
    pub fn dominant_joint(&self, v: usize) -> usize {
        argmax_sparse(self.skinning.row(v))
    }

    /// `T̄ + B_S(β) + B_P(θ)`.
    pub fn rest_pose_mesh(&self, params: &BodyParams) -> Result<Vec<V3>, BodyError> {
        params.check(self)?;
        let nb = self.num_betas();
        let np = 9 * (self.num_joints() - 1);
        let pose_feat: Vec<f64> = if self.has_pose_correctives() {
            params.theta[1..]
                .iter()
                .flat_map(|r| {
                    let m = r.matrix() - Matrix3::identity();
                    (0..9).map(move |e| m[(e / 3, e % 3)])
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut out = self.template.clone();
        for (v, p) in out.iter_mut().enumerate() {
            for c in 0..3 {
                let row = v * 3 + c;
                let mut d = 0.0;
                for (s, b) in params.beta.iter().enumerate() {
                    d += self.shape_dirs[row * nb + s] * b;
                }
                for (e, f) in pose_feat.iter().enumerate() {
                    d += self.pose_dirs[row * np + e] * f;
                }
                p[c] += d;
            }
        }
        Ok(out)
    }

    /// `J · vertices`.
    pub fn regress_joints(&self, vertices: &[V3]) -> Vec<V3> {
        (0..self.num_joints())
            .map(|k| self.joint_regressor.row(k).map(|(v, w)| vertices[v] * w).sum())
            .collect()
    }

    /// Rotates every part about its rest joint, accumulating root first,
    /// then applies the root translation.
    pub fn forward_kinematics(&self, params: &BodyParams) -> Result<Kinematics, BodyError> {
        params.check(self)?;
        let rest = self.rest_pose_mesh(&BodyParams { theta: vec![Rotation::identity(); self.num_joints()], ..params.clone() })?;
        let rest_joints = self.regress_joints(&rest);
        Ok(self.kinematics_from(&params.theta, &rest_joints, &params.trans))
    }

    fn kinematics_from(&self, theta: &[Rotation], rest_joints: &[V3], trans: &V3) -> Kinematics {
        let global_rots = self.tree.accumulate(theta);
        let mut joints: Vec<V3> = Vec::with_capacity(theta.len());
        for k in 0..theta.len() {
            let p = match self.tree.parent(k) {
                None => rest_joints[0] + trans,
                Some(par) => joints[par] + global_rots[par].apply(&(rest_joints[k] - rest_joints[par])),
            };
            joints.push(p);
        }
        let transforms = (0..theta.len())
            .map(|k| {
                let r = global_rots[k].matrix();
                let t = joints[k] - r * rest_joints[k];
                let mut m = Matrix4::identity();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
                m
            })
            .collect();
        Kinematics { global_rots, transforms, joints, rest_joints: rest_joints.to_vec() }
    }

    /// Linear blend skinning of the shaped, pose-corrected rest mesh.
    pub fn lbs(&self, params: &BodyParams) -> Result<Posed, BodyError> {
        let rest = self.rest_pose_mesh(params)?;
        let kin = self.forward_kinematics(params)?;
        let vertices = self.skin(&rest, &kin.transforms);
        Ok(Posed { vertices, joints: kin.joints, global_rots: kin.global_rots })
    }

    /// `Σ_k W_vk · G_k · x_v` in homogeneous form.
    pub fn skin(&self, rest: &[V3], transforms: &[Matrix4<f64>]) -> Vec<V3> {
        rest.iter()
            .enumerate()
            .map(|(v, x)| {
                let mut blended = Matrix4::zeros();
                for (k, w) in self.skinning.row(v) {
                    blended += transforms[k] * w;
                }
                let h = blended * x.push(1.0);
                V3::new(h[0], h[1], h[2])
            })
            .collect()
    }
}

pub(crate) fn argmax_sparse(entries: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (k, w) in entries {
        if w > best.1 || (w == best.1 && k < best.0) {
            best = (k, w);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::build_toy_body;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> BodyModel {
        build_toy_body(&BodyConfig::default()).unwrap()
    }

    fn random_params(m: &BodyModel, rng: &mut ChaCha8Rng, spread: f64) -> BodyParams {
        BodyParams {
            beta: (0..m.num_betas()).map(|_| rng.random_range(-2.0..2.0)).collect(),
            theta: (0..m.num_joints())
                .map(|_| {
                    let v = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    Rotation::from_rotvec(v * spread)
                })
                .collect(),
            trans: V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn default_model_is_valid() {
        let m = model();
        m.validate().unwrap();
        assert_eq!(m.num_joints(), 16);
        for v in 0..m.num_vertices() {
            let s: f64 = m.skinning().row(v).map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn regressor_recovers_skeleton() {
        for joints in [16, 22, 24] {
            let m = build_toy_body(&BodyConfig { joints, ..Default::default() }).unwrap();
            let j = m.regress_joints(m.template());
            for (a, b) in j.iter().zip(m.skeleton_joints()) {
                assert!((a - b).norm() < 0.01);
            }
        }
    }

    #[test]
    fn rest_mesh_examples() {
        let m = model();
        let p = BodyParams::rest(&m);
        assert_eq!(m.rest_pose_mesh(&p).unwrap(), m.template());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b1: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b2: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let with = |b: &[f64]| m.rest_pose_mesh(&BodyParams { beta: b.to_vec(), ..p.clone() }).unwrap();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let (r1, r2, r12) = (with(&b1), with(&b2), with(&sum));
        for v in 0..m.num_vertices() {
            let t = m.template()[v];
            assert!(((r12[v] - t) - ((r1[v] - t) + (r2[v] - t))).norm() < 1e-12);
        }
        assert!(matches!(
            m.rest_pose_mesh(&BodyParams { beta: vec![0.0; 3], ..p }),
            Err(BodyError::BetaLength { expected: 10, got: 3 })
        ));
    }

    #[test]
    fn identity_pose_adds_no_correctives() {
        let m = build_toy_body(&BodyConfig { pose_corrective_scale: 1.0, ..Default::default() }).unwrap();
        assert!(m.has_pose_correctives());
        let mut p = BodyParams::rest(&m);
        p.beta[3] = 1.5;
        let zeroed = BodyModel { pose_dirs: vec![0.0; m.pose_dirs.len()], ..m.clone() };
        assert_eq!(m.rest_pose_mesh(&p).unwrap(), zeroed.rest_pose_mesh(&p).unwrap());
    }

    #[test]
    fn identity_fk_and_lbs() {
        let m = model();
        let mut p = BodyParams::rest(&m);
        p.beta[0] = 0.8;
        let kin = m.forward_kinematics(&p).unwrap();
        for t in &kin.transforms {
            assert!((t - Matrix4::identity()).norm() < 1e-12);
        }
        for (a, b) in kin.joints.iter().zip(&kin.rest_joints) {
            assert!((a - b).norm() < 1e-12);
        }
        let posed = m.lbs(&p).unwrap();
        let rest = m.rest_pose_mesh(&p).unwrap();
        for (a, b) in posed.vertices.iter().zip(&rest) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn root_rotation_moves_body_rigidly() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(&m, &mut rng, 0.5);
        p.trans = V3::zeros();
        let base = m.forward_kinematics(&p).unwrap();
        let r = Rotation::from_rotvec(V3::new(0.3, -1.2, 0.8));
        p.theta[0] = r * p.theta[0];
        let moved = m.forward_kinematics(&p).unwrap();
        let root = base.joints[0];
        for (a, b) in base.joints.iter().zip(&moved.joints) {
            assert!((r.apply(&(a - root)) + root - b).norm() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_is_explicit_chain_product() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_params(&m, &mut rng, 1.5);
            let kin = m.forward_kinematics(&p).unwrap();
            for k in 0..m.num_joints() {
                let mut prod = Matrix3::identity();
                for j in m.tree().path_to(k) {
                    prod *= p.theta[j].matrix();
                }
                assert!((prod - kin.global_rots[k].matrix()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rigidly_skinned_vertex_follows_its_part() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&m, &mut rng, 1.0);
        let rest = m.rest_pose_mesh(&p).unwrap();
        let kin = m.forward_kinematics(&p).unwrap();
        let posed = m.lbs(&p).unwrap();
        let mut seen = 0;
        for v in 0..m.num_vertices() {
            let row: Vec<_> = m.skinning().row(v).collect();
            if row.len() == 1 {
                let g = kin.transforms[row[0].0];
                let h = g * rest[v].push(1.0);
                assert!((V3::new(h[0], h[1], h[2]) - posed.vertices[v]).norm() < 1e-12);
                seen += 1;
            }
        }
        assert!(seen > m.num_vertices() / 3);
    }

    /// Re-roots the skeleton at `root` and rebuilds posed joints by walking
    /// the undirected tree from there, using only global rotations and one
    /// anchored joint position.
    fn rerooted_joints(m: &BodyModel, kin: &Kinematics, root: usize) -> Vec<V3> {
        let k = m.num_joints();
        let mut pos: Vec<Option<V3>> = vec![None; k];
        pos[root] = Some(kin.joints[root]);
        let mut stack = vec![root];
        let j = &kin.rest_joints;
        let g = &kin.global_rots;
        while let Some(a) = stack.pop() {
            let pa = pos[a].unwrap();
            let mut nbrs = m.tree().children(a);
            nbrs.extend(m.tree().parent(a));
            for b in nbrs {
                if pos[b].is_some() {
                    continue;
                }
                // The bone between a and b is rotated by the parent's rotation.
                let p = if m.tree().parent(b) == Some(a) {
                    pa + g[a].apply(&(j[b] - j[a]))
                } else {
                    pa - g[b].apply(&(j[a] - j[b]))
                };
                pos[b] = Some(p);
                stack.push(b);
            }
        }
        pos.into_iter().map(Option::unwrap).collect()
    }

    #[test]
    fn rerooting_oracle_reproduces_lbs() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for root in [0, 7, 14, 9] {
            let p = random_params(&m, &mut rng, 1.2);
            let posed = m.lbs(&p).unwrap();
            let kin = m.forward_kinematics(&p).unwrap();
            let joints = rerooted_joints(&m, &kin, root);
            let rest = m.rest_pose_mesh(&p).unwrap();
            let mut v2v = 0.0;
            for (v, x) in rest.iter().enumerate() {
                let mut y = V3::zeros();
                for (k, w) in m.skinning().row(v) {
                    y += (kin.global_rots[k].apply(&(x - kin.rest_joints[k])) + joints[k]) * w;
                }
                v2v += (y - posed.vertices[v]).norm();
            }
            assert!(v2v / (m.num_vertices() as f64) < 1e-6);
        }
    }

    #[test]
    fn posed_joints_match_weighted_rigid_transforms_of_rest_joints() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&m, &mut rng, 1.0);
        let kin = m.forward_kinematics(&p).unwrap();
        for k in 0..m.num_joints() {
            let h = kin.transforms[k] * kin.rest_joints[k].push(1.0);
            assert!((V3::new(h[0], h[1], h[2]) - kin.joints[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn shape_derivative_matches_basis() {
        let m = model();
        let p = BodyParams::rest(&m);
        let h = 1e-4;
        for s in 0..m.num_betas() {
            let mut up = p.clone();
            let mut down = p.clone();
            up.beta[s] = h;
            down.beta[s] = -h;
            let (a, b) = (m.lbs(&up).unwrap().vertices, m.lbs(&down).unwrap().vertices);
            for v in (0..m.num_vertices()).step_by(37) {
                for c in 0..3 {
                    let fd = (a[v][c] - b[v][c]) / (2.0 * h);
                    let col = m.shape_dirs()[(v * 3 + c) * m.num_betas() + s];
                    assert!(crate::microtensor::relative_error(fd, col) < 1e-4 || (fd - col).abs() < 1e-10);
                }
            }
        }
    }
}
