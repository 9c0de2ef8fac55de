use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use super::model::{argmax_sparse, BodyModel, BodyParams};
use super::BodyError;
use crate::group60::Rotation;

type V3 = Vector3<f64>;

/// Default normal displacement half-width in meters.
pub const DEFAULT_NOISE: f64 = 0.005;
/// Log-normal σ of the per-part sampling density multipliers.
pub const DENSITY_SIGMA: f64 = 0.5;

/// One point cloud with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub points: Vec<V3>,
    pub labels: Vec<usize>,
    pub gt_params: BodyParams,
    pub gt_vertices: Vec<V3>,
    pub gt_joints: Vec<V3>,
    pub gt_global_rots: Vec<Rotation>,
}

impl SampleRecord {
    /// Applies the rigid rotation `r` about the origin to the whole record:
    /// points, mesh and joints move, every global rotation is left-composed
    /// with `r`, and the translation is chosen so the posed root follows.
    pub fn rotated(&self, r: &Rotation, rest_root: &V3) -> SampleRecord {
        let mut params = self.gt_params.clone();
        params.theta[0] = *r * params.theta[0];
        params.trans = r.apply(&(rest_root + params.trans)) - rest_root;
        SampleRecord {
            points: self.points.iter().map(|p| r.apply(p)).collect(),
            labels: self.labels.clone(),
            gt_params: params,
            gt_vertices: self.gt_vertices.iter().map(|p| r.apply(p)).collect(),
            gt_joints: self.gt_joints.iter().map(|p| r.apply(p)).collect(),
            gt_global_rots: self.gt_global_rots.iter().map(|g| *r * *g).collect(),
        }
    }
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[V3], faces: &[[usize; 3]]) -> Vec<V3> {
    let mut n = vec![V3::zeros(); vertices.len()];
    for f in faces {
        let fn_ = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
        for &i in f {
            n[i] += fn_;
        }
    }
    n.into_iter().map(|v| v.try_normalize(1e-300).unwrap_or_else(V3::zeros)).collect()
}

/// Samples `n` surface points with non-uniform density and normal jitter.
///
/// Triangles are drawn with probability proportional to area times a
/// per-part log-normal multiplier, positions are uniform in barycentric
/// coordinates, and each point is pushed along the interpolated normal by
/// `uniform(-noise, noise)`. Sampling happens with the root rotation and
/// translation removed and the result is then moved rigidly, so a rigid
/// motion of the root moves the cloud exactly.
pub fn sample_point_cloud(
    model: &BodyModel,
    params: &BodyParams,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<SampleRecord, BodyError> {
    if n == 0 {
        return Err(BodyError::InvalidConfig("point count must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(BodyError::InvalidConfig(format!("noise must be finite and nonnegative, got {noise}")));
    }
    let posed = model.lbs(params)?;
    let mut canonical = params.clone();
    canonical.theta[0] = Rotation::identity();
    canonical.trans = V3::zeros();
    let local = model.lbs(&canonical)?;
    let root_rest = model.forward_kinematics(&canonical)?.joints[0];

    let faces = model.faces();
    let normals = vertex_normals(&local.vertices, faces);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = LogNormal::new(0.0, DENSITY_SIGMA).expect("valid log-normal");
    let multipliers: Vec<f64> = (0..model.num_joints()).map(|_| density.sample(&mut rng)).collect();

    let skin_of = |v: usize| model.skinning().row(v);
    let weights: Vec<f64> = faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| local.vertices[i]);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            area * multipliers[blend_argmax(&[(f[0], 1.0), (f[1], 1.0), (f[2], 1.0)], &skin_of)]
        })
        .collect();
    let pick = WeightedIndex::new(&weights).map_err(|_| BodyError::DegenerateMesh)?;

    let r0 = params.theta[0];
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let f = faces[pick.sample(&mut rng)];
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let sq = r1.sqrt();
        let bary = [1.0 - sq, sq * (1.0 - r2), sq * r2];
        let mut p = V3::zeros();
        let mut nrm = V3::zeros();
        for (i, &b) in f.iter().zip(&bary) {
            p += local.vertices[*i] * b;
            nrm += normals[*i] * b;
        }
        let offset: f64 = rng.random_range(-1.0..=1.0) * noise;
        if let Some(u) = nrm.try_normalize(1e-300) {
            p += u * offset;
        }
        points.push(r0.apply(&(p - root_rest)) + root_rest + params.trans);
        labels.push(blend_argmax(&[(f[0], bary[0]), (f[1], bary[1]), (f[2], bary[2])], &skin_of));
    }

    Ok(SampleRecord {
        points,
        labels,
        gt_params: params.clone(),
        gt_vertices: posed.vertices,
        gt_joints: posed.joints,
        gt_global_rots: posed.global_rots,
    })
}

/// Argmax over joints of `Σ_i b_i · W[v_i]`.
fn blend_argmax<'a, I>(corners: &[(usize, f64)], skin_of: &impl Fn(usize) -> I) -> usize
where
    I: Iterator<Item = (usize, f64)> + 'a,
{
    let mut acc: Vec<(usize, f64)> = Vec::with_capacity(6);
    for &(v, b) in corners {
        for (k, w) in skin_of(v) {
            match acc.iter_mut().find(|e| e.0 == k) {
                Some(e) => e.1 += b * w,
                None => acc.push((k, b * w)),
            }
        }
    }
    argmax_sparse(acc.into_iter())
}

/// Relabels fine part indices into supervised parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartMap {
    map: Vec<usize>,
    parts: usize,
}

impl PartMap {
    pub fn new(map: Vec<usize>, parts: usize) -> Result<Self, BodyError> {
        if let Some(&bad) = map.iter().find(|&&p| p >= parts) {
            return Err(BodyError::InvalidConfig(format!("part {bad} out of range {parts}")));
        }
        Ok(PartMap { map, parts })
    }

    pub fn identity(k: usize) -> Self {
        PartMap { map: (0..k).collect(), parts: k }
    }

    /// Merges fine joints into `into` (pairs `(from, into)`), renumbering the
    /// surviving joints in order.
    fn merging(k: usize, merges: &[(usize, usize)]) -> Self {
        let merged = |j: usize| merges.iter().find(|m| m.0 == j).map_or(j, |m| m.1);
        let survivors: Vec<usize> = (0..k).filter(|&j| merged(j) == j).collect();
        let map = (0..k).map(|j| survivors.iter().position(|&s| s == merged(j)).expect("survivor")).collect();
        PartMap { map, parts: survivors.len() }
    }

    /// Supervised parts for each toy skeleton: feet merge into ankles and
    /// hands into wrists, giving 20 parts for 22 and 24 joints.
    pub fn for_joints(k: usize) -> Self {
        match k {
            22 => Self::merging(22, &[(10, 7), (11, 8)]),
            24 => Self::merging(24, &[(10, 7), (11, 8), (22, 20), (23, 21)]),
            _ => Self::identity(k),
        }
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn fine(&self) -> usize {
        self.map.len()
    }

    pub fn part_of(&self, fine: usize) -> usize {
        self.map[fine]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }
}

/// Maps every label through `mapping`.
pub fn merge_parts(labels: &[usize], mapping: &PartMap) -> Result<Vec<usize>, BodyError> {
    labels
        .iter()
        .map(|&l| mapping.map.get(l).copied().ok_or(BodyError::UnmappedLabel(l)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{build_toy_body, BodyConfig};
    use crate::group60::build_icosahedral_group;

    fn point_triangle_distance(p: V3, a: V3, b: V3, c: V3) -> f64 {
        // Closest point by projecting onto the plane and clamping to edges.
        let n = (b - a).cross(&(c - a)).normalize();
        let q = p - n * n.dot(&(p - a));
        let inside = [(a, b), (b, c), (c, a)].iter().all(|(u, v)| (v - u).cross(&(q - u)).dot(&n) >= -1e-15);
        if inside {
            return (p - q).norm();
        }
        [(a, b), (b, c), (c, a)]
            .iter()
            .map(|(u, v)| {
                let t = ((p - u).dot(&(v - u)) / (v - u).norm_squared()).clamp(0.0, 1.0);
                (p - (u + (v - u) * t)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn posed_params(m: &BodyModel) -> BodyParams {
        let mut p = BodyParams::rest(m);
        p.theta[4] = Rotation::from_rotvec(V3::new(0.4, 0.0, 0.1));
        p.theta[12] = Rotation::from_rotvec(V3::new(0.0, 0.7, -0.2));
        p.theta[0] = Rotation::from_rotvec(V3::new(0.2, 1.0, 0.0));
        p.beta[2] = 1.0;
        p.trans = V3::new(0.1, -0.2, 0.3);
        p
    }

    #[test]
    fn count_and_determinism() {
        let m = build_toy_body(&BodyConfig::default()).unwrap();
        let p = posed_params(&m);
        let a = sample_point_cloud(&m, &p, 5000, DEFAULT_NOISE, 9).unwrap();
        assert_eq!(a.points.len(), 5000);
        assert_eq!(a.labels.len(), 5000);
        let b = sample_point_cloud(&m, &p, 5000, DEFAULT_NOISE, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_points_lie_on_surface() {
        let m = build_toy_body(&BodyConfig::default()).unwrap();
        let p = posed_params(&m);
        let rec = sample_point_cloud(&m, &p, 300, 0.0, 1).unwrap();
        let v = &rec.gt_vertices;
        for q in &rec.points {
            let d = m
                .faces()
                .iter()
                .map(|f| point_triangle_distance(*q, v[f[0]], v[f[1]], v[f[2]]))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6, "{d}");
        }
    }

    #[test]
    fn rigid_motion_of_root_moves_cloud_rigidly() {
        let m = build_toy_body(&BodyConfig::default()).unwrap();
        let g = build_icosahedral_group();
        let p = posed_params(&m);
        let base = sample_point_cloud(&m, &p, 1000, DEFAULT_NOISE, 4).unwrap();
        let j0 = m.forward_kinematics(&BodyParams { theta: vec![Rotation::identity(); 16], ..p.clone() }).unwrap().rest_joints[0];
        for k in [1, 17, 42] {
            let r = *g.element(k);
            let t = V3::new(0.5, -1.0, 2.0);
            let mut q = p.clone();
            q.theta[0] = r * q.theta[0];
            q.trans += t;
            let moved = sample_point_cloud(&m, &q, 1000, DEFAULT_NOISE, 4).unwrap();
            assert_eq!(base.labels, moved.labels);
            for (a, b) in base.points.iter().zip(&moved.points) {
                let expect = r.apply(&(a - j0 - p.trans)) + j0 + p.trans + t;
                assert!((expect - b).norm() < 1e-6, "{} {:?} {:?}", (expect - b).norm(), expect, b);
            }
        }
    }

    #[test]
    fn rest_pose_labels_cover_every_part() {
        for joints in [16, 22, 24] {
            let m = build_toy_body(&BodyConfig { joints, ..Default::default() }).unwrap();
            let rec = sample_point_cloud(&m, &BodyParams::rest(&m), 5000, DEFAULT_NOISE, 2).unwrap();
            let map = PartMap::for_joints(joints);
            let labels = merge_parts(&rec.labels, &map).unwrap();
            for part in 0..map.parts() {
                assert!(labels.contains(&part), "joints {joints}: part {part} empty");
            }
        }
    }

    #[test]
    fn rotated_record_is_consistent_with_regeneration() {
        let m = build_toy_body(&BodyConfig::default()).unwrap();
        let g = build_icosahedral_group();
        let p = posed_params(&m);
        let rec = sample_point_cloud(&m, &p, 200, DEFAULT_NOISE, 3).unwrap();
        let j0 = m.forward_kinematics(&BodyParams { theta: vec![Rotation::identity(); 16], ..p.clone() }).unwrap().rest_joints[0];
        let rot = rec.rotated(g.element(9), &j0);
        let posed = m.lbs(&rot.gt_params).unwrap();
        for (a, b) in posed.vertices.iter().zip(&rot.gt_vertices) {
            assert!((a - b).norm() < 1e-9);
        }
        for (a, b) in posed.global_rots.iter().zip(&rot.gt_global_rots) {
            assert!((a.matrix() - b.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn merge_examples() {
        let labels: Vec<usize> = (0..24).collect();
        assert_eq!(merge_parts(&labels[..16], &PartMap::identity(16)).unwrap(), &labels[..16]);
        let m24 = PartMap::for_joints(24);
        assert_eq!(m24.parts(), 20);
        let merged = merge_parts(&labels, &m24).unwrap();
        assert_eq!(merged[10], merged[7]);
        assert_eq!(merged[23], merged[21]);
        assert_eq!(*merged.iter().max().unwrap(), 19);
        assert_eq!(PartMap::for_joints(22).parts(), 20);
        let all_zero = PartMap::new(vec![0; 24], 1).unwrap();
        assert!(merge_parts(&labels, &all_zero).unwrap().iter().all(|&l| l == 0));
        assert!(matches!(merge_parts(&[30], &m24), Err(BodyError::UnmappedLabel(30))));
    }
}
