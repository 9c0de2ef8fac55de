use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::bodymodel::{
    merge_parts, sample_point_cloud, BodyModel, BodyParams, Dataset, DatasetHeader, PartMap, SampleRecord,
};
use crate::group60::{Rotation, RotationGroup};

/// How the root joint is oriented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RootMode {
    Off,
    GroupElement,
    UniformSo3,
}

/// Joint-angle distribution: each non-root joint turns by independent
/// uniform angles about its local x, y and z axes (applied x, then y, then z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    /// Half-widths in radians, one triple per joint. The root entry is unused.
    pub ranges: Vec<[f64; 3]>,
    pub root: RootMode,
    pub seed: u64,
}

/// Truncation bound for sampled shape coefficients.
pub const BETA_BOUND: f64 = 2.0;

// Sub-stream ids. Shape and sampling streams do not depend on the pose
// distribution, so ID and OOD sets from one seed share bodies and samplers.
const STREAM_BETA: u64 = 1;
const STREAM_POSE: u64 = 2;
const STREAM_ROOT: u64 = 3;
const STREAM_SAMPLER: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn uniform_rotation(rng: &mut impl Rng) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let q = Quaternion::new(q[0], q[1], q[2], q[3]);
        if q.norm() > 1e-6 {
            return Rotation::from_quaternion(UnitQuaternion::from_quaternion(q));
        }
    }
}

impl PoseDistribution {
    pub fn uniform(joints: usize, half_width: f64, root: RootMode, seed: u64) -> Self {
        PoseDistribution { ranges: vec![[half_width; 3]; joints], root, seed }
    }

    /// Mild poses, upright root: ±30° per axis.
    pub fn in_distribution(joints: usize, seed: u64) -> Self {
        Self::uniform(joints, 30f64.to_radians(), RootMode::Off, seed)
    }

    /// Extreme poses under arbitrary global orientation: ±90° per axis.
    pub fn out_of_distribution(joints: usize, seed: u64) -> Self {
        Self::uniform(joints, 90f64.to_radians(), RootMode::UniformSo3, seed)
    }

    pub fn validate(&self, joints: usize) -> Result<(), TrainError> {
        if self.ranges.len() != joints {
            return Err(TrainError::InvalidConfig(format!("{} ranges for {joints} joints", self.ranges.len())));
        }
        if self.ranges.iter().flatten().any(|r| !(0.0..=std::f64::consts::PI).contains(r)) {
            return Err(TrainError::InvalidConfig("angle ranges must lie in [0, π]".into()));
        }
        Ok(())
    }

    fn joint_rotation(&self, k: usize, rng: &mut impl Rng) -> Rotation {
        let [rx, ry, rz] = self.ranges[k];
        let mut angle = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let (ax, ay, az) = (angle(rx), angle(ry), angle(rz));
        Rotation::from_axis_angle(Vector3::z(), az)
            * Rotation::from_axis_angle(Vector3::y(), ay)
            * Rotation::from_axis_angle(Vector3::x(), ax)
    }

    fn root_rotation(&self, group: &RotationGroup, rng: &mut impl Rng) -> Rotation {
        match self.root {
            RootMode::Off => Rotation::identity(),
            RootMode::GroupElement => *group.element(rng.random_range(0..group.len())),
            RootMode::UniformSo3 => uniform_rotation(rng),
        }
    }
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= BETA_BOUND {
            return v;
        }
    }
}

/// Sizes and seed of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    pub n_points: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Draws `count` bodies from `dist` and renders a labelled cloud of each.
pub fn generate_dataset(
    model: &BodyModel,
    part_map: &PartMap,
    group: &RotationGroup,
    dist: &PoseDistribution,
    spec: &GenSpec,
) -> Result<Dataset, TrainError> {
    let k = model.num_joints();
    dist.validate(k)?;
    if part_map.fine() != k {
        return Err(TrainError::InvalidConfig("part map does not cover every joint".into()));
    }
    if spec.n_points == 0 {
        return Err(TrainError::InvalidConfig("point count must be positive".into()));
    }
    let mut beta_rng = stream(spec.seed, STREAM_BETA);
    let mut pose_rng = stream(dist.seed ^ spec.seed, STREAM_POSE);
    let mut root_rng = stream(dist.seed ^ spec.seed, STREAM_ROOT);
    let mut sampler_rng = stream(spec.seed, STREAM_SAMPLER);
    let mut records = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let beta: Vec<f64> = (0..model.num_betas()).map(|_| truncated_normal(&mut beta_rng)).collect();
        let mut theta: Vec<Rotation> = (0..k).map(|j| dist.joint_rotation(j, &mut pose_rng)).collect();
        theta[0] = dist.root_rotation(group, &mut root_rng);
        let params = BodyParams { beta, theta, trans: Vector3::zeros() };
        let record = sample_point_cloud(model, &params, spec.n_points, spec.noise, sampler_rng.random())?;
        let labels = merge_parts(&record.labels, part_map)?;
        records.push(SampleRecord { labels, ..record });
    }
    let header = DatasetHeader {
        body: model.config().clone(),
        part_map: part_map.clone(),
        n_points: spec.n_points,
        n_vertices: model.num_vertices(),
        noise: spec.noise,
        seed: spec.seed,
    };
    Ok(Dataset { header, records })
}
