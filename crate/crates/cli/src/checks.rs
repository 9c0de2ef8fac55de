//! Property suite behind `equibody check`. Every property reports the
//! measured quantity next to the bound it is held to.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use clap::ValueEnum;
use equibody::bodymodel::{build_toy_body, sample_point_cloud, BodyConfig, BodyModel, BodyParams, PartMap, DEFAULT_NOISE};
use equibody::equinet::{self_attention, EquiNet, HeadLayout, NetworkConfig};
use equibody::group60::{angular_distance, chordal_weighted_mean, GroupError, GroupWeights, Rotation, RotationGroup};
use equibody::microtensor::{grad_check, grad_check_directional, Csr, Graph, Tensor, TensorError, Var};
use equibody::trainer::{generate_dataset, uniform_rotation, GenSpec, LossContext, LossInputs, LossWeights, PoseDistribution, RootMode};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Group,
    Tensor,
    Body,
    Net,
    Footprint,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Group, Suite::Tensor, Suite::Body, Suite::Net, Suite::Footprint];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Group => "group",
            Suite::Tensor => "tensor",
            Suite::Body => "body",
            Suite::Net => "net",
            Suite::Footprint => "footprint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub name: String,
    pub measured: f64,
    pub bound: Bound,
    pub seconds: f64,
}

impl Property {
    fn new(name: impl Into<String>, measured: f64, bound: Bound, started: Instant) -> Self {
        Property { name: name.into(), measured, bound, seconds: started.elapsed().as_secs_f64() }
    }

    /// NaN never passes.
    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost(b) => self.measured <= b,
            Bound::AtLeast(b) => self.measured >= b,
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, b) = match self.bound {
            Bound::AtMost(b) => ("<=", b),
            Bound::AtLeast(b) => (">=", b),
        };
        write!(
            f,
            "{} {:<34} measured {:<11.4e} {op} {:<9.3e} {:>7.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            b,
            self.seconds
        )
    }
}

pub fn run_suite(suite: Suite, group: &RotationGroup) -> Vec<Property> {
    match suite {
        Suite::Group => {
            let mut out = group_structure(group);
            out.extend(chordal_oracle(group, 1000, 100_000, 0));
            out
        }
        Suite::Tensor => tensor_primitives(),
        Suite::Body => body_properties(),
        Suite::Net => {
            let mut out = vec![rotation_permutation(group, 60, 500), attention_equivariance(20)];
            out.extend(head_contracts(group, 10));
            out.push(end_to_end_gradient(group));
            out
        }
        Suite::Footprint => footprint(group).to_vec(),
    }
}

// ---------------------------------------------------------------- group

fn cayley_entry(group: &RotationGroup, i: usize, j: usize) -> Option<usize> {
    let v = group.cayley()[i][j] as usize;
    (v < group.len()).then_some(v)
}

/// Closure, identity, inverses, minimum spacing and the angle histogram,
/// each recomputed from the raw elements and table.
pub fn group_structure(group: &RotationGroup) -> Vec<Property> {
    let n = group.len();
    let el = group.elements();
    let t = Instant::now();
    let mut closure = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            closure = closure.max(match cayley_entry(group, i, j) {
                Some(k) => (el[i] * el[j]).chordal_distance(&el[k]),
                None => f64::INFINITY,
            });
        }
    }
    let closure = Property::new("group.closure", closure, Bound::AtMost(1e-9), t);

    let t = Instant::now();
    let mut ident = el[0].chordal_distance(&Rotation::identity());
    for j in 0..n {
        if cayley_entry(group, 0, j) != Some(j) || cayley_entry(group, j, 0) != Some(j) {
            ident = f64::INFINITY;
        }
    }
    let identity = Property::new("group.identity", ident, Bound::AtMost(1e-9), t);

    let t = Instant::now();
    let mut inv = 0.0f64;
    for i in 0..n {
        let found = (0..n).find(|&j| cayley_entry(group, i, j) == Some(0));
        inv = inv.max(match found {
            Some(j) if cayley_entry(group, j, i) == Some(0) => (el[i] * el[j]).chordal_distance(&Rotation::identity()),
            _ => f64::INFINITY,
        });
    }
    let inverses = Property::new("group.inverses", inv, Bound::AtMost(1e-9), t);

    let t = Instant::now();
    let mut min = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            min = min.min(angular_distance(&el[i], &el[j]).to_degrees());
        }
    }
    let spacing = Property::new("group.min_spacing_deg", min, Bound::AtLeast(72.0 - 1e-6), t);

    let t = Instant::now();
    let expected = [(0u32, 1usize), (72, 12), (120, 20), (144, 12), (180, 15)];
    let mut counts = std::collections::BTreeMap::new();
    for r in el {
        *counts.entry(r.angle().to_degrees().round() as u32).or_insert(0usize) += 1;
    }
    let mut off = 0usize;
    for (deg, c) in &counts {
        let want = expected.iter().find(|(d, _)| d == deg).map_or(0, |(_, c)| *c);
        off += c.abs_diff(want);
    }
    off += expected.iter().filter(|(d, _)| !counts.contains_key(d)).map(|(_, c)| c).sum::<usize>();
    let hist = Property::new("group.angle_histogram_errors", off as f64, Bound::AtMost(0.0), t);

    vec![closure, identity, inverses, spacing, hist]
}

/// Super-Fibonacci spiral of `n` unit quaternions covering SO(3) evenly.
pub fn so3_covering(n: usize) -> Vec<Matrix3<f64>> {
    let phi = 2f64.sqrt();
    let psi = 1.533_751_168_755_204_3;
    (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            let (r, big_r) = ((s / n as f64).sqrt(), (1.0 - s / n as f64).sqrt());
            let (a, b) = (2.0 * std::f64::consts::PI * s / phi, 2.0 * std::f64::consts::PI * s / psi);
            let q = nalgebra::Quaternion::new(big_r * b.cos(), r * a.sin(), r * a.cos(), big_r * b.sin());
            *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
        })
        .collect()
}

fn chordal_cost(group: &RotationGroup, w: &[f64], r: &Matrix3<f64>) -> f64 {
    group.elements().iter().zip(w).map(|(g, wi)| wi * (r - g.matrix()).norm_squared()).sum()
}

/// Direct minimisation of `Σ w_j ‖R - G_j‖²`: the best of `covering`
/// candidates, refined by a shrinking axis-aligned pattern search.
pub fn brute_force_chordal_mean(group: &RotationGroup, w: &[f64], covering: &[Matrix3<f64>]) -> Matrix3<f64> {
    // Σ w‖R - G‖² = 6Σw - 2 tr(Rᵀ Σ wG), so the scan only needs the trace.
    let mut m = Matrix3::zeros();
    for (g, wi) in group.elements().iter().zip(w) {
        m += g.matrix() * *wi;
    }
    let mut best = covering[0];
    let mut best_score = f64::NEG_INFINITY;
    for c in covering {
        let score = c.component_mul(&m).sum();
        if score > best_score {
            best_score = score;
            best = *c;
        }
    }
    let mut cost = chordal_cost(group, w, &best);
    let mut step = 4f64.to_radians();
    while step > 1e-9 {
        let mut improved = false;
        for axis in [V3::x(), V3::y(), V3::z()] {
            for sign in [1.0, -1.0] {
                let cand = Rotation::from_axis_angle(axis, sign * step).matrix() * best;
                let c = chordal_cost(group, w, &cand);
                if c < cost {
                    cost = c;
                    best = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

/// Closed-form means against [`brute_force_chordal_mean`] on random weight
/// vectors, plus the uniform-weight degeneracy.
pub fn chordal_oracle(group: &RotationGroup, vectors: usize, covering: usize, seed: u64) -> Vec<Property> {
    let t = Instant::now();
    let grid = so3_covering(covering);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_deg, mut excess) = (0.0f64, 0.0f64);
    for v in 0..vectors {
        // Alternate flat and peaked vectors; the latter resemble trained pose weights.
        let w: Vec<f64> = (0..group.len())
            .map(|_| if v % 2 == 0 { rng.random::<f64>() } else { { let z: f64 = StandardNormal.sample(&mut rng); (2.0 * z).exp() } })
            .collect();
        let oracle = brute_force_chordal_mean(group, &w, &grid);
        let closed = match chordal_weighted_mean(group, &GroupWeights::new(w.clone()).expect("valid weights")) {
            Ok(r) => r,
            Err(_) => {
                worst_deg = f64::INFINITY;
                continue;
            }
        };
        let oracle_rot = Rotation::from_matrix(oracle).unwrap_or_else(|_| Rotation::identity());
        worst_deg = worst_deg.max(angular_distance(&closed, &oracle_rot).to_degrees());
        excess = excess.max(chordal_cost(group, &w, closed.matrix()) - chordal_cost(group, &w, &oracle));
    }
    let agree = Property::new("group.chordal_vs_brute_force_deg", worst_deg, Bound::AtMost(2.0), t);
    let t = Instant::now();
    let optimal = Property::new("group.chordal_cost_excess", excess, Bound::AtMost(1e-9), t);
    let t = Instant::now();
    let uniform = GroupWeights::new(vec![1.0; group.len()]).expect("valid weights");
    let degenerate = matches!(chordal_weighted_mean(group, &uniform), Err(GroupError::DegenerateMean { .. }));
    let degenerate = Property::new("group.uniform_weights_degenerate", if degenerate { 0.0 } else { 1.0 }, Bound::AtMost(0.0), t);
    vec![agree, optimal, degenerate]
}

// ---------------------------------------------------------------- tensor

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("consistent shape")
}

/// Reduces `y` to a scalar through a fixed random linear functional.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let n = g.value(y).len();
    let flat = g.reshape(y, &[n])?;
    let w = g.constant(random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[n]))?;
    let p = g.mul(flat, w)?;
    g.sum(p, 0)
}

type Unary = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>>;
type Binary = Box<dyn Fn(&mut Graph<f64>, Var, Var) -> Result<Var, TensorError>>;

const PRIMITIVE_TOL: f64 = 1e-4;
const PRIMITIVE_STEP: f64 = 1e-5;

fn unary_check(seed: u64, shape: &[usize], op: &Unary) -> Result<f64, TensorError> {
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape);
    grad_check(|g, v| { let y = op(g, v)?; project(g, y, seed + 1) }, &x, PRIMITIVE_STEP)
}

fn binary_check(seed: u64, sa: &[usize], sb: &[usize], op: &Binary) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (random_tensor(&mut rng, sa), random_tensor(&mut rng, sb));
    let ea = grad_check(|g, v| { let c = g.constant(b.clone())?; let y = op(g, v, c)?; project(g, y, seed + 1) }, &a, PRIMITIVE_STEP)?;
    let eb = grad_check(|g, v| { let c = g.constant(a.clone())?; let y = op(g, c, v)?; project(g, y, seed + 1) }, &b, PRIMITIVE_STEP)?;
    Ok(ea.max(eb))
}

/// Central-difference checks of every differentiable primitive.
pub fn tensor_primitives() -> Vec<Property> {
    let csr = Arc::new(Csr::from_rows(4, &[vec![(0, 0.5), (3, -1.0)], vec![], vec![(1, 2.0), (2, 0.25), (3, 1.0)]]));
    let targets = vec![2usize, 0, 1, 1];
    let unary: Vec<(&str, Vec<usize>, Unary)> = vec![
        ("scale", vec![3, 4], Box::new(|g, x| g.scale(x, -1.7))),
        ("relu", vec![4, 5], Box::new(|g, x| g.relu(x))),
        ("transpose", vec![2, 3, 4], Box::new(|g, x| g.transpose(x))),
        ("reshape", vec![2, 6], Box::new(|g, x| g.reshape(x, &[3, 4]))),
        ("spmm", vec![4, 3], Box::new(move |g, x| g.spmm(csr.clone(), x))),
        ("softmax", vec![3, 5], Box::new(|g, x| g.softmax(x, 1))),
        ("softmax_axis0", vec![4, 2, 3], Box::new(|g, x| g.softmax(x, 0))),
        ("sum", vec![3, 4, 2], Box::new(|g, x| g.sum(x, 1))),
        ("mean", vec![3, 4, 2], Box::new(|g, x| g.mean(x, 2))),
        ("max", vec![5, 3, 2], Box::new(|g, x| g.max(x, 0))),
        ("gather_rows", vec![4, 3], Box::new(|g, x| g.gather_rows(x, &[3, 0, 3, 1]))),
        ("weighted_mse_loss", vec![4, 3], Box::new(|g, x| {
            let t = g.constant(Tensor::full(&[4, 3], 0.3))?;
            g.weighted_mse_loss(x, t, &[1.0, 2.0, 0.5, 1.0])
        })),
        ("cross_entropy_loss", vec![4, 3], Box::new(move |g, x| g.cross_entropy_loss(x, &targets))),
        ("standardize", vec![5, 3], Box::new(|g, x| g.standardize(x, 0, 1e-5))),
    ];
    let binary: Vec<(&str, Vec<usize>, Vec<usize>, Binary)> = vec![
        ("add", vec![2, 3, 4], vec![3, 4], Box::new(|g, a, b| g.add(a, b))),
        ("sub", vec![3, 4], vec![3, 4], Box::new(|g, a, b| g.sub(a, b))),
        ("mul", vec![2, 3, 4], vec![4], Box::new(|g, a, b| g.mul(a, b))),
        ("matmul", vec![2, 3, 4], vec![2, 4, 5], Box::new(|g, a, b| g.matmul(a, b))),
        ("matmul_shared", vec![2, 3, 4], vec![4, 5], Box::new(|g, a, b| g.matmul(a, b))),
        ("concat", vec![2, 3], vec![2, 5], Box::new(|g, a, b| g.concat(&[a, b], 1))),
        ("mse_loss", vec![3, 4], vec![3, 4], Box::new(|g, a, b| g.mse_loss(a, b))),
    ];
    let mut out = Vec::new();
    for (i, (name, shape, op)) in unary.iter().enumerate() {
        let t = Instant::now();
        let err = unary_check(100 + 2 * i as u64, shape, op).unwrap_or(f64::INFINITY);
        out.push(Property::new(format!("tensor.grad.{name}"), err, Bound::AtMost(PRIMITIVE_TOL), t));
    }
    for (i, (name, sa, sb, op)) in binary.iter().enumerate() {
        let t = Instant::now();
        let err = binary_check(200 + 2 * i as u64, sa, sb, op).unwrap_or(f64::INFINITY);
        out.push(Property::new(format!("tensor.grad.{name}"), err, Bound::AtMost(PRIMITIVE_TOL), t));
    }
    out
}

// ---------------------------------------------------------------- body

fn random_pose(model: &BodyModel, rng: &mut ChaCha8Rng, half: f64) -> BodyParams {
    let mut p = BodyParams::rest(model);
    for b in p.beta.iter_mut() {
        *b = rng.random_range(-1.5..1.5);
    }
    for r in p.theta.iter_mut() {
        *r = Rotation::from_rotvec(V3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)));
    }
    p
}

/// Identity-pose skinning, rigid motion of sampled clouds and the
/// local/global rotation round trip.
pub fn body_properties() -> Vec<Property> {
    let model = build_toy_body(&BodyConfig { pose_corrective_scale: 1.0, ..BodyConfig::default() }).expect("default body builds");
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let t = Instant::now();
    let mut err = 0.0f64;
    for _ in 0..5 {
        let mut p = random_pose(&model, &mut rng, 1.0);
        p.theta = vec![Rotation::identity(); model.num_joints()];
        let posed = model.lbs(&p).expect("valid params");
        let rest = model.rest_pose_mesh(&p).expect("valid params");
        err = posed.vertices.iter().zip(&rest).fold(err, |m, (a, b)| m.max((a - b).norm()));
    }
    let identity = Property::new("body.identity_lbs_m", err, Bound::AtMost(1e-12), t);

    let t = Instant::now();
    let mut err = 0.0f64;
    for trial in 0..5u64 {
        let mut p = random_pose(&model, &mut rng, 0.5);
        p.trans = V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut rest = p.clone();
        rest.theta = vec![Rotation::identity(); model.num_joints()];
        let j0 = model.forward_kinematics(&rest).expect("valid params").rest_joints[0];
        let base = sample_point_cloud(&model, &p, 1000, DEFAULT_NOISE, trial).expect("sampling");
        let r = uniform_rotation(&mut rng);
        let shift = V3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut q = p.clone();
        q.theta[0] = r * q.theta[0];
        q.trans += shift;
        let moved = sample_point_cloud(&model, &q, 1000, DEFAULT_NOISE, trial).expect("sampling");
        if moved.labels != base.labels {
            err = f64::INFINITY;
        }
        for (a, b) in base.points.iter().zip(&moved.points) {
            let expect = r.apply(&(a - j0 - p.trans)) + j0 + p.trans + shift;
            err = err.max((expect - b).norm());
        }
    }
    let rigid = Property::new("body.sampling_rigid_motion_m", err, Bound::AtMost(1e-6), t);

    let t = Instant::now();
    let tree = model.tree();
    let mut err = 0.0f64;
    for _ in 0..100 {
        let global: Vec<Rotation> = (0..tree.len()).map(|_| uniform_rotation(&mut rng)).collect();
        let back = tree.accumulate(&tree.local_from_global(&global));
        err = global.iter().zip(&back).fold(err, |m, (a, b)| m.max((a.matrix() - b.matrix()).norm()));
    }
    let round_trip = Property::new("body.local_global_round_trip", err, Bound::AtMost(1e-9), t);
    vec![identity, rigid, round_trip]
}

// ---------------------------------------------------------------- network

fn toy_cloud(n: usize, seed: u64) -> (BodyModel, PartMap, Vec<V3>) {
    let model = build_toy_body(&BodyConfig::default()).expect("default body builds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_pose(&model, &mut rng, 0.4);
    let rec = sample_point_cloud(&model, &p, n, DEFAULT_NOISE, seed).expect("sampling");
    let map = PartMap::for_joints(model.num_joints());
    (model, map, rec.points)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Features of a rotated cloud against the group-axis permutation of the
/// original features, for the first `elements` group elements.
pub fn rotation_permutation(group: &RotationGroup, elements: usize, points: usize) -> Property {
    let t = Instant::now();
    let (model, map, cloud) = toy_cloud(points, 31);
    let c = 16;
    let net = EquiNet::new(NetworkConfig { channels: c, ..NetworkConfig::default() }, HeadLayout::from_body(&model, &map).expect("layout"))
        .expect("valid network");
    let params = net.init_params::<f32>(32);
    let features = |cloud: &[V3]| -> Result<Vec<f64>, Box<dyn std::error::Error>> {
        let prep = net.prepare(group, cloud)?;
        let mut g = Graph::new();
        let out = net.build(&mut g, &params, group, &prep.plan, None)?;
        Ok(g.value(out.features).to_f64_vec())
    };
    let run = || -> Result<f64, Box<dyn std::error::Error>> {
        let f0 = features(&cloud)?;
        let mut worst = 0.0f64;
        for k in 0..elements {
            let r = group.element(k);
            let rotated: Vec<V3> = cloud.iter().map(|p| r.apply(p)).collect();
            let f1 = features(&rotated)?;
            let perm = group.permutation_of(k)?;
            let mut expect = vec![0.0; f0.len()];
            for i in 0..cloud.len() {
                for (j, &pj) in perm.iter().enumerate() {
                    let (src, dst) = ((i * 60 + j) * c, (i * 60 + pj) * c);
                    expect[dst..dst + c].copy_from_slice(&f0[src..src + c]);
                }
            }
            worst = worst.max(max_rel(&f1, &expect));
        }
        Ok(worst)
    };
    Property::new("net.rotation_permutes_group_axis", run().unwrap_or(f64::INFINITY), Bound::AtMost(1e-4), t)
}

/// Labels, shape and decoded rotations under `trials` random group elements.
pub fn head_contracts(group: &RotationGroup, trials: usize) -> Vec<Property> {
    let t = Instant::now();
    let (model, map, cloud) = toy_cloud(500, 41);
    let net = EquiNet::new(NetworkConfig { channels: 16, ..NetworkConfig::default() }, HeadLayout::from_body(&model, &map).expect("layout"))
        .expect("valid network");
    let params = net.init_params::<f32>(42);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (mut flips, mut beta_err, mut rot_err) = (0.0f64, 0.0f64, 0.0f64);
    match net.infer(group, &params, &cloud) {
        Ok(base) => {
            for _ in 0..trials {
                let r = *group.element(rng.random_range(1..group.len()));
                let rotated: Vec<V3> = cloud.iter().map(|p| r.apply(p)).collect();
                let Ok(moved) = net.infer(group, &params, &rotated) else {
                    flips = f64::INFINITY;
                    continue;
                };
                flips += base.labels.iter().zip(&moved.labels).filter(|(a, b)| a != b).count() as f64;
                beta_err = beta_err.max(max_rel(&moved.pose.beta_hat, &base.pose.beta_hat));
                for (a, b) in base.pose.global_rots.iter().zip(&moved.pose.global_rots) {
                    rot_err = rot_err.max(angular_distance(&(r * *a), b));
                }
            }
        }
        Err(_) => (flips, beta_err, rot_err) = (f64::INFINITY, f64::INFINITY, f64::INFINITY),
    }
    let secs = t.elapsed().as_secs_f64();
    let mk = |name: &str, m: f64, b: f64| Property { name: name.into(), measured: m, bound: Bound::AtMost(b), seconds: secs };
    vec![
        mk("net.segmentation_label_flips", flips, 0.0),
        mk("net.shape_invariance_rel", beta_err, 1e-4),
        mk("net.pose_equivariance_rad", rot_err, 1e-3),
    ]
}

/// Permuting the tokens of self-attention permutes its output.
pub fn attention_equivariance(trials: usize) -> Property {
    let t = Instant::now();
    let layout = HeadLayout::new(vec![None, Some(0), Some(0), Some(1)], vec![0, 1, 2, 2], 3, 5).expect("layout");
    let net = EquiNet::new(NetworkConfig { channels: 16, ..NetworkConfig::default() }, layout).expect("valid network");
    let params = net.init_params::<f64>(51);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let run = |rng: &mut ChaCha8Rng| -> Result<f64, TensorError> {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let x = random_tensor(rng, &[60, 64]);
            let mut perm: Vec<usize> = (0..60).collect();
            perm.shuffle(rng);
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let xp = g.gather_rows(xv, &perm)?;
            let y = self_attention(&mut g, &params, "pose.attn1", xv, 8)?;
            let yp = self_attention(&mut g, &params, "pose.attn1", xp, 8)?;
            let y_then_p = g.gather_rows(y, &perm)?;
            worst = worst.max(max_rel(&g.value(yp).to_f64_vec(), &g.value(y_then_p).to_f64_vec()));
        }
        Ok(worst)
    };
    Property::new("net.attention_permutation_rel", run(&mut rng).unwrap_or(f64::INFINITY), Bound::AtMost(1e-5), t)
}

/// Directional finite differences of the full training loss on a 64-point
/// cloud with respect to every parameter tensor.
pub fn end_to_end_gradient(group: &RotationGroup) -> Property {
    let t = Instant::now();
    let run = || -> Result<f64, Box<dyn std::error::Error>> {
        let model = build_toy_body(&BodyConfig { vertices: 800, ..BodyConfig::default() })?;
        let map = PartMap::for_joints(16);
        let dist = PoseDistribution::uniform(16, 0.5, RootMode::UniformSo3, 61);
        let ds = generate_dataset(&model, &map, group, &dist, &GenSpec { count: 1, n_points: 64, noise: DEFAULT_NOISE, seed: 62 })?;
        let record = &ds.records[0];
        let cfg = NetworkConfig { channels: 4, heads: 2, embed: 8, hidden: 8, neighbor_cap: 16, ..NetworkConfig::default() };
        let net = EquiNet::new(cfg, HeadLayout::from_body(&model, &map)?)?;
        let params = net.init_params::<f64>(63);
        let prep = net.prepare(group, &record.points)?;
        let ctx = LossContext::<f64>::new(&model);
        let lambda = LossWeights::default();
        let err = grad_check_directional(
            |g, p| {
                let wrap = |e: &dyn fmt::Display| TensorError::InvalidArgument(e.to_string());
                let out = net.build(g, p, group, &prep.plan, None).map_err(|e| wrap(&e))?;
                let inputs = LossInputs { logits: out.logits, rot_sums: out.rot_sums, beta: out.beta };
                Ok(ctx.total_loss(g, &inputs, record, &lambda).map_err(|e| wrap(&e))?.total)
            },
            &params,
            1e-5,
            3,
            1e-5,
            64,
        )?;
        Ok(err)
    };
    Property::new("net.end_to_end_loss_gradient", run().unwrap_or(f64::INFINITY), Bound::AtMost(1e-3), t)
}

/// Parameter count and single-cloud inference time of the full-size network.
pub fn footprint(group: &RotationGroup) -> [Property; 2] {
    let t = Instant::now();
    let model = build_toy_body(&BodyConfig { joints: 22, vertices: 6890, ..BodyConfig::default() }).expect("body builds");
    let map = PartMap::for_joints(22);
    let net = EquiNet::new(NetworkConfig::default(), HeadLayout::from_body(&model, &map).expect("layout")).expect("valid network");
    let count = Property::new("footprint.paper_shape_parameters", net.param_count() as f64, Bound::AtMost(2e6), t);
    let params = net.init_params::<f32>(71);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let p = random_pose(&model, &mut rng, 0.4);
    let cloud = sample_point_cloud(&model, &p, 5000, DEFAULT_NOISE, 73).expect("sampling").points;
    let t = Instant::now();
    let ok = net.infer(group, &params, &cloud).is_ok();
    let secs = t.elapsed().as_secs_f64();
    let time = Property { name: "footprint.inference_5000_points_s".into(), measured: if ok { secs } else { f64::INFINITY }, bound: Bound::AtMost(2.0), seconds: secs };
    [count, time]
}

#[cfg(test)]
mod tests {
    use super::*;
    use equibody::group60::build_icosahedral_group;

    #[test]
    fn covering_is_dense() {
        let grid = so3_covering(20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let r = uniform_rotation(&mut rng);
            let best = grid.iter().map(|m| angular_distance(&r, &Rotation::from_matrix(*m).unwrap())).fold(f64::INFINITY, f64::min);
            assert!(best.to_degrees() < 8.0, "{}", best.to_degrees());
        }
    }

    #[test]
    fn brute_force_finds_a_known_mean() {
        let group = build_icosahedral_group();
        let mut w = vec![0.0; 60];
        w[13] = 1.0;
        let r = brute_force_chordal_mean(&group, &w, &so3_covering(2000));
        assert!(angular_distance(&Rotation::from_matrix(r).unwrap(), group.element(13)).to_degrees() < 1e-5);
    }

    #[test]
    fn corrupted_table_fails_closure() {
        let group = build_icosahedral_group();
        let mut cayley = group.cayley().to_vec();
        cayley[5].swap(7, 8);
        let bad = RotationGroup::from_parts(group.elements().to_vec(), cayley).unwrap();
        let props = group_structure(&bad);
        assert!(!props[0].passed());
        assert!(group_structure(&group).iter().all(Property::passed));
    }

    #[test]
    fn nan_never_passes() {
        let p = Property { name: "x".into(), measured: f64::NAN, bound: Bound::AtMost(1.0), seconds: 0.0 };
        assert!(!p.passed());
    }
}
