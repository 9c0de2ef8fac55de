//! Procedural capsule humanoid standing in a T-pose, y up, facing +z, with
//! its left side at +x.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::BodyModel;
use super::tree::KinematicTree;
use super::BodyError;
use crate::microtensor::Csr;

type V3 = Vector3<f64>;

/// Vertices around each capsule ring.
pub const RING_SIDES: usize = 10;
/// Fraction of a segment over which it blends with its parent or child.
const BLEND: f64 = 0.25;
/// Relative change of a length per unit shape coefficient.
const LENGTH_RATE: f64 = 0.06;
/// Relative change of a radius per unit shape coefficient.
const GIRTH_RATE: f64 = 0.08;
/// Number of shape parameters the builder understands.
pub const MAX_BETAS: usize = 10;
const MIN_RINGS: usize = 3;
const EXTRA_RINGS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    /// Joint count: 16, 22 or 24.
    pub joints: usize,
    /// Upper bound on the vertex count.
    pub vertices: usize,
    pub betas: usize,
    /// Magnitude of the pose-corrective basis; 0 disables it.
    pub pose_corrective_scale: f64,
    pub seed: u64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        BodyConfig { joints: 16, vertices: 2000, betas: 10, pose_corrective_scale: 0.0, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Limb {
    Torso,
    Leg,
    Arm,
    Lateral,
    Head,
}

impl Limb {
    fn length_param(self) -> usize {
        match self {
            Limb::Torso => 1,
            Limb::Leg => 2,
            Limb::Arm => 3,
            Limb::Lateral => 4,
            Limb::Head => 9,
        }
    }

    fn girth_param(self) -> usize {
        match self {
            Limb::Torso | Limb::Lateral => 6,
            Limb::Leg => 7,
            Limb::Arm => 8,
            Limb::Head => 9,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum End {
    Joint(usize),
    Tip([f64; 3]),
}

#[derive(Clone, Debug)]
struct JointSpec {
    name: String,
    parent: Option<usize>,
    pos: [f64; 3],
    radius: f64,
    end: End,
    offset_limb: Limb,
    seg_limb: Limb,
}

#[derive(Clone, Debug)]
struct ExtraSpec {
    joint: usize,
    start: [f64; 3],
    end: [f64; 3],
    radius: f64,
}

struct Skeleton {
    joints: Vec<JointSpec>,
    extras: Vec<ExtraSpec>,
}

fn mirror(p: [f64; 3]) -> [f64; 3] {
    [-p[0], p[1], p[2]]
}

struct TableBuilder(Vec<JointSpec>);

impl TableBuilder {
    fn one(&mut self, name: &str, parent: Option<usize>, pos: [f64; 3], radius: f64, end: End, off: Limb, seg: Limb) {
        self.0.push(JointSpec { name: name.into(), parent, pos, radius, end, offset_limb: off, seg_limb: seg });
    }

    /// Left joint at `pos` followed by its mirror image; `parents` and `ends`
    /// give (left, right) pairs.
    #[allow(clippy::too_many_arguments)]
    fn pair(&mut self, name: &str, parents: (usize, usize), pos: [f64; 3], radius: f64, ends: (End, End), off: Limb, seg: Limb) {
        self.one(&format!("l_{name}"), Some(parents.0), pos, radius, ends.0, off, seg);
        self.one(&format!("r_{name}"), Some(parents.1), mirror(pos), radius, ends.1, off, seg);
    }
}

fn tip_pair(p: [f64; 3]) -> (End, End) {
    (End::Tip(p), End::Tip(mirror(p)))
}

fn joint_pair(l: usize) -> (End, End) {
    (End::Joint(l), End::Joint(l + 1))
}

fn skeleton16() -> Skeleton {
    use Limb::*;
    let mut t = TableBuilder(Vec::new());
    t.one("pelvis", None, [0.0, 0.93, 0.0], 0.12, End::Joint(3), Torso, Torso);
    t.pair("hip", (0, 0), [0.08, 0.86, 0.0], 0.07, joint_pair(4), Lateral, Leg);
    t.one("spine", Some(0), [0.0, 1.08, 0.0], 0.12, End::Joint(6), Torso, Torso);
    t.pair("knee", (1, 2), [0.09, 0.48, 0.0], 0.055, joint_pair(7), Leg, Leg);
    t.one("chest", Some(3), [0.0, 1.25, 0.0], 0.14, End::Joint(9), Torso, Torso);
    t.pair("ankle", (4, 5), [0.09, 0.08, 0.0], 0.045, tip_pair([0.09, 0.03, 0.17]), Leg, Leg);
    t.one("neck", Some(6), [0.0, 1.48, 0.0], 0.085, End::Tip([0.0, 1.72, 0.0]), Torso, Head);
    t.pair("shoulder", (6, 6), [0.17, 1.42, 0.0], 0.05, joint_pair(12), Lateral, Arm);
    t.pair("elbow", (10, 11), [0.44, 1.42, 0.0], 0.04, joint_pair(14), Arm, Arm);
    t.pair("wrist", (12, 13), [0.68, 1.42, 0.0], 0.035, tip_pair([0.86, 1.42, 0.0]), Arm, Arm);
    Skeleton { joints: t.0, extras: extras(9, 1.62, (14, 15)) }
}

fn skeleton24(hands: bool) -> Skeleton {
    use Limb::*;
    let mut t = TableBuilder(Vec::new());
    t.one("pelvis", None, [0.0, 0.93, 0.0], 0.12, End::Joint(3), Torso, Torso);
    t.pair("hip", (0, 0), [0.08, 0.86, 0.0], 0.07, joint_pair(4), Lateral, Leg);
    t.one("spine1", Some(0), [0.0, 1.03, 0.0], 0.12, End::Joint(6), Torso, Torso);
    t.pair("knee", (1, 2), [0.09, 0.48, 0.0], 0.055, joint_pair(7), Leg, Leg);
    t.one("spine2", Some(3), [0.0, 1.15, 0.0], 0.13, End::Joint(9), Torso, Torso);
    t.pair("ankle", (4, 5), [0.09, 0.08, 0.0], 0.045, joint_pair(10), Leg, Leg);
    t.one("spine3", Some(6), [0.0, 1.27, 0.0], 0.14, End::Joint(12), Torso, Torso);
    t.pair("foot", (7, 8), [0.09, 0.03, 0.09], 0.04, tip_pair([0.09, 0.03, 0.18]), Leg, Leg);
    t.one("neck", Some(9), [0.0, 1.48, 0.0], 0.06, End::Joint(15), Torso, Torso);
    t.pair("collar", (9, 9), [0.06, 1.42, 0.0], 0.06, joint_pair(16), Lateral, Torso);
    t.one("head", Some(12), [0.0, 1.56, 0.0], 0.09, End::Tip([0.0, 1.74, 0.0]), Head, Head);
    t.pair("shoulder", (13, 14), [0.17, 1.42, 0.0], 0.05, joint_pair(18), Lateral, Arm);
    t.pair("elbow", (16, 17), [0.44, 1.42, 0.0], 0.04, joint_pair(20), Arm, Arm);
    let wrist_end = if hands { joint_pair(22) } else { tip_pair([0.86, 1.42, 0.0]) };
    t.pair("wrist", (18, 19), [0.68, 1.42, 0.0], 0.035, wrist_end, Arm, Arm);
    if hands {
        t.pair("hand", (20, 21), [0.76, 1.42, 0.0], 0.033, tip_pair([0.88, 1.42, 0.0]), Arm, Arm);
    }
    Skeleton { joints: t.0, extras: extras(15, 1.66, (20, 21)) }
}

/// Nose, chest, buttocks and thumbs: they break the left/right and
/// front/back symmetries that a rotation-invariant feature would otherwise be
/// blind to, as the face, chest and seat of a real body do.
fn extras(head: usize, nose_y: f64, wrists: (usize, usize)) -> Vec<ExtraSpec> {
    let thumb = |joint, x: f64| ExtraSpec { joint, start: [x, 1.42, 0.03], end: [x, 1.42, 0.09], radius: 0.013 };
    vec![
        ExtraSpec { joint: head, start: [0.0, nose_y, 0.07], end: [0.0, nose_y, 0.13], radius: 0.018 },
        thumb(wrists.0, 0.73),
        thumb(wrists.1, -0.73),
    ]
}

fn skeleton(joints: usize) -> Result<Skeleton, BodyError> {
    match joints {
        16 => Ok(skeleton16()),
        22 => Ok(skeleton24(false)),
        24 => Ok(skeleton24(true)),
        k => Err(BodyError::InvalidTree(format!("no toy skeleton with {k} joints (16, 22 or 24)"))),
    }
}

fn v3(p: [f64; 3]) -> V3 {
    V3::new(p[0], p[1], p[2])
}

/// One capsule of the mesh: a ring-swept cylinder with pole caps.
#[derive(Clone, Debug)]
struct Capsule {
    joint: usize,
    extra: bool,
    rings: usize,
    dir: V3,
    u: V3,
    v: V3,
}

struct Geometry {
    joints: Vec<V3>,
    /// Per capsule: start, end, radius.
    segments: Vec<(V3, V3, f64)>,
}

/// Joint positions and capsule extents for shape coefficients `s`. Every
/// output is affine in `s`, which makes the shape basis exact.
fn geometry(sk: &Skeleton, s: &[f64; MAX_BETAS]) -> Geometry {
    let len_scale = |limb: Limb| 1.0 + LENGTH_RATE * (s[0] + s[limb.length_param()]);
    let girth_scale = |limb: Limb| 1.0 + GIRTH_RATE * (s[5] + s[limb.girth_param()]);
    let mut joints: Vec<V3> = Vec::with_capacity(sk.joints.len());
    for j in &sk.joints {
        let p = match j.parent {
            None => v3(j.pos) * (1.0 + LENGTH_RATE * (s[0] + s[Limb::Leg.length_param()])),
            Some(par) => joints[par] + (v3(j.pos) - v3(sk.joints[par].pos)) * len_scale(j.offset_limb),
        };
        joints.push(p);
    }
    let mut segments = Vec::new();
    for (k, j) in sk.joints.iter().enumerate() {
        let b = match j.end {
            End::Joint(c) => joints[c],
            End::Tip(t) => joints[k] + (v3(t) - v3(j.pos)) * len_scale(j.seg_limb),
        };
        segments.push((joints[k], b, j.radius * girth_scale(j.seg_limb)));
    }
    for e in &sk.extras {
        let seg = sk.joints[e.joint].seg_limb;
        let base = v3(sk.joints[e.joint].pos);
        let a = joints[e.joint] + (v3(e.start) - base) * len_scale(seg);
        let b = joints[e.joint] + (v3(e.end) - base) * len_scale(seg);
        segments.push((a, b, e.radius * girth_scale(seg)));
    }
    Geometry { joints, segments }
}

fn frame(dir: V3) -> (V3, V3) {
    let helper = if dir.x.abs() < 0.9 { V3::x() } else { V3::z() };
    let u = dir.cross(&helper).normalize();
    let v = dir.cross(&u);
    (u, v)
}

const POLE_FACTOR: f64 = 0.6;

fn mesh_vertices(caps: &[Capsule], geo: &Geometry) -> Vec<V3> {
    let mut out = Vec::new();
    for (c, &(a, b, r)) in caps.iter().zip(&geo.segments) {
        for i in 0..c.rings {
            let t = i as f64 / (c.rings - 1) as f64;
            let center = a + (b - a) * t;
            for j in 0..RING_SIDES {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / RING_SIDES as f64;
                out.push(center + (c.u * phi.cos() + c.v * phi.sin()) * r);
            }
        }
        out.push(a - c.dir * (r * POLE_FACTOR));
        out.push(b + c.dir * (r * POLE_FACTOR));
    }
    out
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Skinning row for a capsule vertex at axial parameter `t`.
fn skin_row(joint: usize, parent: Option<usize>, child: Option<usize>, t: f64) -> Vec<(usize, f64)> {
    let w_par = match parent {
        Some(_) if t < BLEND => 0.5 * smoothstep(1.0 - t / BLEND),
        _ => 0.0,
    };
    let w_child = match child {
        Some(_) if t > 1.0 - BLEND => 0.5 * smoothstep((t - (1.0 - BLEND)) / BLEND),
        _ => 0.0,
    };
    let mut row = vec![(joint, 1.0 - w_par - w_child)];
    if w_par > 0.0 {
        row.push((parent.expect("checked"), w_par));
    }
    if w_child > 0.0 {
        row.push((child.expect("checked"), w_child));
    }
    row.sort_by_key(|e| e.0);
    row
}

/// Builds the procedural body. Deterministic in `config`.
pub fn build_toy_body(config: &BodyConfig) -> Result<BodyModel, BodyError> {
    if config.betas > MAX_BETAS {
        return Err(BodyError::InvalidConfig(format!("at most {MAX_BETAS} shape coefficients, got {}", config.betas)));
    }
    if !config.pose_corrective_scale.is_finite() {
        return Err(BodyError::InvalidConfig("pose_corrective_scale must be finite".into()));
    }
    let sk = skeleton(config.joints)?;
    let k = sk.joints.len();
    let tree = KinematicTree::new(
        sk.joints.iter().map(|j| j.parent).collect(),
        sk.joints.iter().map(|j| j.name.clone()).collect(),
    )?;
    let template_geo = geometry(&sk, &[0.0; MAX_BETAS]);

    // Ring budget, distributed by segment length.
    let extra_verts = sk.extras.len() * (EXTRA_RINGS * RING_SIDES + 2);
    let needed = k * (MIN_RINGS * RING_SIDES + 2) + extra_verts;
    if config.vertices < needed {
        return Err(BodyError::BudgetTooSmall { budget: config.vertices, needed });
    }
    let spare_rings = (config.vertices - needed) / RING_SIDES;
    let lengths: Vec<f64> = template_geo.segments[..k].iter().map(|(a, b, _)| (b - a).norm()).collect();
    let total_len: f64 = lengths.iter().sum();

    let mut caps = Vec::new();
    for (i, &(a, b, _)) in template_geo.segments.iter().enumerate() {
        let dir = (b - a).normalize();
        let (u, v) = frame(dir);
        let (joint, extra, rings) = if i < k {
            (i, false, MIN_RINGS + (spare_rings as f64 * lengths[i] / total_len).floor() as usize)
        } else {
            (sk.extras[i - k].joint, true, EXTRA_RINGS)
        };
        caps.push(Capsule { joint, extra, rings, dir, u, v });
    }

    // Topology, skinning, regressor and markers.
    let mut faces = Vec::new();
    let mut skin_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut regressor_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
    let mut markers = Vec::new();
    let mut base = 0;
    for c in &caps {
        let child = match (c.extra, sk.joints[c.joint].end) {
            (false, End::Joint(ch)) => Some(ch),
            _ => None,
        };
        let parent = if c.extra { None } else { tree.parent(c.joint) };
        for i in 0..c.rings {
            let t = i as f64 / (c.rings - 1) as f64;
            for _ in 0..RING_SIDES {
                skin_rows.push(if c.extra { vec![(c.joint, 1.0)] } else { skin_row(c.joint, parent, child, t) });
            }
        }
        skin_rows.push(if c.extra { vec![(c.joint, 1.0)] } else { skin_row(c.joint, parent, child, 0.0) });
        skin_rows.push(if c.extra { vec![(c.joint, 1.0)] } else { skin_row(c.joint, parent, child, 1.0) });

        let ring = |i: usize, j: usize| base + i * RING_SIDES + j % RING_SIDES;
        for i in 0..c.rings - 1 {
            for j in 0..RING_SIDES {
                faces.push([ring(i, j), ring(i, j + 1), ring(i + 1, j + 1)]);
                faces.push([ring(i, j), ring(i + 1, j + 1), ring(i + 1, j)]);
            }
        }
        let (start_pole, end_pole) = (base + c.rings * RING_SIDES, base + c.rings * RING_SIDES + 1);
        for j in 0..RING_SIDES {
            faces.push([start_pole, ring(0, j + 1), ring(0, j)]);
            faces.push([end_pole, ring(c.rings - 1, j), ring(c.rings - 1, j + 1)]);
        }
        if !c.extra {
            regressor_rows[c.joint] = (0..RING_SIDES).map(|j| (ring(0, j), 1.0 / RING_SIDES as f64)).collect();
            markers.push(ring(0, 0));
        }
        if c.extra || child.is_none() {
            markers.push(end_pole);
        }
        base += c.rings * RING_SIDES + 2;
    }
    let n_verts = base;
    let template = mesh_vertices(&caps, &template_geo);
    debug_assert_eq!(template.len(), n_verts);

    // Shape basis: exact finite differences of an affine map, then mean-centred.
    let nb = config.betas;
    let mut shape_dirs = vec![0.0; n_verts * 3 * nb];
    for s in 0..nb {
        let mut e = [0.0; MAX_BETAS];
        e[s] = 1.0;
        let moved = mesh_vertices(&caps, &geometry(&sk, &e));
        let diff: Vec<V3> = moved.iter().zip(&template).map(|(m, t)| m - t).collect();
        let mean = diff.iter().sum::<V3>() / n_verts as f64;
        for (v, d) in diff.iter().enumerate() {
            for c in 0..3 {
                shape_dirs[(v * 3 + c) * nb + s] = d[c] - mean[c];
            }
        }
    }

    // Pose correctives, concentrated where a segment blends with its parent.
    let np = 9 * (k - 1);
    let mut pose_dirs = vec![0.0; n_verts * 3 * np];
    if config.pose_corrective_scale != 0.0 && k > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (v, row) in skin_rows.iter().enumerate() {
            let main = row.iter().copied().fold((0, f64::NEG_INFINITY), |b, e| if e.1 > b.1 { e } else { b }).0;
            let blend = 1.0 - row.iter().find(|e| e.0 == main).map_or(1.0, |e| e.1);
            for c in 0..3 {
                for e in 0..9 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if main >= 1 {
                        pose_dirs[(v * 3 + c) * np + 9 * (main - 1) + e] = config.pose_corrective_scale * 0.01 * z * blend;
                    }
                }
            }
        }
    }

    BodyModel::from_parts(
        config.clone(),
        tree,
        template,
        shape_dirs,
        pose_dirs,
        Csr::from_rows(n_verts, &regressor_rows),
        Csr::from_rows(k, &skin_rows),
        faces,
        markers,
        template_geo.joints,
    )
}
