use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bodymodel::{BodyModel, KinematicTree, PartMap};
use crate::group60::RotationGroup;
use crate::microtensor::{Graph, ParamStore, Real, Tensor, Var};

use super::geometry::{normalize_cloud, GeometryPlan, Normalization, KERNEL_POINTS};
use super::heads::{decode_pose, pose_head, rotation_sums, shape_head, PoseEstimate};
use super::layers::{group_pool, part_invariant, segment_parts, soft_aggregate, spconv_forward};
use super::{EquinetError, NetworkConfig};

type V3 = Vector3<f64>;

/// Body-dependent sizes of the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLayout {
    pub parents: Vec<Option<usize>>,
    /// Supervised part whose features drive each joint.
    pub joint_part: Vec<usize>,
    pub parts: usize,
    pub betas: usize,
}

impl HeadLayout {
    pub fn new(parents: Vec<Option<usize>>, joint_part: Vec<usize>, parts: usize, betas: usize) -> Result<Self, EquinetError> {
        let names = (0..parents.len()).map(|k| k.to_string()).collect();
        KinematicTree::new(parents.clone(), names).map_err(|e| EquinetError::InvalidConfig(e.to_string()))?;
        if joint_part.len() != parents.len() || joint_part.iter().any(|&p| p >= parts) || parts == 0 || betas == 0 {
            return Err(EquinetError::InvalidConfig("joint-to-part map does not fit the part count".into()));
        }
        Ok(HeadLayout { parents, joint_part, parts, betas })
    }

    pub fn from_body(model: &BodyModel, parts: &PartMap) -> Result<Self, EquinetError> {
        if parts.fine() != model.num_joints() {
            return Err(EquinetError::InvalidConfig("part map does not cover every joint".into()));
        }
        Self::new(model.tree().parents().to_vec(), parts.as_slice().to_vec(), parts.parts(), model.num_betas())
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    /// Part of each joint's parent; the root uses its own part.
    pub fn parent_part(&self) -> Vec<usize> {
        self.parents.iter().enumerate().map(|(k, p)| self.joint_part[p.unwrap_or(k)]).collect()
    }
}

/// A cloud ready for the network: normalized points and geometry plan.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub normalization: Normalization,
    pub points: Vec<V3>,
    pub plan: GeometryPlan,
}

/// Graph handles of every intermediate the losses and tests need.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    /// `[N, M, C]`
    pub features: Var,
    /// `[N, C]`
    pub pooled: Var,
    /// `[N, P]`
    pub logits: Var,
    /// `[N, P]`
    pub alpha: Var,
    /// `[P, M, C]`, after the `P/N` rescale.
    pub parts: Var,
    /// `[P, C]`
    pub part_inv: Var,
    /// `[K, M]`
    pub weights: Var,
    /// `[K, 3, 3]`
    pub rot_sums: Var,
    /// `[betas]`
    pub beta: Var,
}

/// Decoded inference result.
#[derive(Clone, Debug)]
pub struct Inference {
    pub pose: PoseEstimate,
    /// `[N, P]` row-major.
    pub alpha: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquiNet {
    pub config: NetworkConfig,
    pub layout: HeadLayout,
}

impl EquiNet {
    pub fn new(config: NetworkConfig, layout: HeadLayout) -> Result<Self, EquinetError> {
        config.validate()?;
        Ok(EquiNet { config, layout })
    }

    pub fn tree(&self) -> Result<KinematicTree, EquinetError> {
        let names = (0..self.layout.joints()).map(|k| k.to_string()).collect();
        KinematicTree::new(self.layout.parents.clone(), names).map_err(|e| EquinetError::InvalidConfig(e.to_string()))
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let cfg = &self.config;
        let (c, hid, e) = (cfg.channels, cfg.hidden, cfg.embed);
        let relu = std::f64::consts::SQRT_2;
        let mut specs = Vec::new();
        let linear = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize, gain: f64| {
            specs.push((format!("{name}.w"), vec![i, o], Init::Normal { fan_in: i, gain }));
            specs.push((format!("{name}.b"), vec![o], Init::Zero));
        };
        let attention = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, w: usize| {
            let d = e / cfg.heads;
            for h in 0..cfg.heads {
                for t in ["q", "k", "v"] {
                    specs.push((format!("{prefix}.h{h}.{t}"), vec![w, d], Init::Normal { fan_in: w, gain: 1.0 }));
                }
            }
            specs.push((format!("{prefix}.out.w"), vec![e, e], Init::Normal { fan_in: e, gain: 1.0 }));
            specs.push((format!("{prefix}.out.b"), vec![e], Init::Zero));
            if w != e {
                specs.push((format!("{prefix}.skip"), vec![w, e], Init::Normal { fan_in: w, gain: 1.0 }));
            }
        };

        specs.push(("spconv1.theta".into(), vec![KERNEL_POINTS, c], Init::Normal { fan_in: KERNEL_POINTS, gain: 4.0 }));
        specs.push(("spconv2.theta".into(), vec![KERNEL_POINTS * c, c], Init::Normal { fan_in: KERNEL_POINTS * c, gain: 4.0 }));

        linear(&mut specs, "seg.l1", c, hid, relu);
        linear(&mut specs, "seg.l2", hid, hid, relu);
        linear(&mut specs, "seg.l3", c + 2 * hid, hid, relu);
        linear(&mut specs, "seg.out", hid, self.layout.parts, 1.0);

        let mut w = if cfg.parent_conditioning { 2 * c } else { c };
        for l in 0..cfg.pose_layers {
            attention(&mut specs, &format!("pose.attn{l}"), w);
            w = e;
        }
        linear(&mut specs, "pose.mlp1", e, hid, relu);
        linear(&mut specs, "pose.mlp2", hid, hid, relu);
        linear(&mut specs, "pose.mlp3", hid, 1, 3.0);

        let mut w = c;
        for l in 0..cfg.shape_layers {
            attention(&mut specs, &format!("shape.attn{l}"), w);
            w = e;
        }
        linear(&mut specs, "shape.proj", e, cfg.shape_proj, 1.0);
        linear(&mut specs, "shape.mlp1", self.layout.parts * cfg.shape_proj, hid, relu);
        linear(&mut specs, "shape.mlp2", hid, self.layout.betas, 0.1);
        specs
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Fresh weights, a pure function of `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in self.param_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zero => vec![0.0; n],
                Init::Normal { fan_in, gain } => {
                    let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            store.insert(&name, Tensor::from_f64(&shape, &data).expect("matching shape"));
        }
        store
    }

    /// Normalizes a raw cloud (meters) and builds its geometry plan.
    pub fn prepare(&self, group: &RotationGroup, cloud: &[V3]) -> Result<Prepared, EquinetError> {
        let (points, normalization) = normalize_cloud(cloud)?;
        let plan = GeometryPlan::new(group, &points, &vec![1.0; points.len()], &self.config)?;
        Ok(Prepared { normalization, points, plan })
    }

    /// Records the full forward pass on `g`. With `gt_labels` the part
    /// features are pooled with one-hot ground-truth memberships instead of
    /// the predicted ones; the segmentation head is evaluated either way.
    pub fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        group: &RotationGroup,
        plan: &GeometryPlan,
        gt_labels: Option<&[usize]>,
    ) -> Result<NetOutputs, EquinetError> {
        let n = plan.n_points;
        let p = self.layout.parts;
        let features = spconv_forward(g, params, plan, self.config.channels)?;
        let pooled = group_pool(g, features)?;
        let (logits, alpha) = segment_parts(g, params, pooled)?;
        let membership = match gt_labels {
            None => alpha,
            Some(labels) => {
                if labels.len() != n {
                    return Err(EquinetError::Shape(format!("{} labels for {n} points", labels.len())));
                }
                let mut one_hot = vec![0.0; n * p];
                for (i, &l) in labels.iter().enumerate() {
                    if l >= p {
                        return Err(EquinetError::Shape(format!("label {l} out of range {p}")));
                    }
                    one_hot[i * p + l] = 1.0;
                }
                g.constant(Tensor::from_f64(&[n, p], &one_hot)?)?
            }
        };
        let parts = soft_aggregate(g, features, membership)?;
        let parts = g.scale(parts, p as f64 / n as f64)?;
        let part_inv = part_invariant(g, parts)?;
        let weights = pose_head(g, params, parts, &self.layout, &self.config)?;
        let rot_sums = rotation_sums(g, group, &weights)?;
        let beta = shape_head(g, params, part_inv, &self.config)?;
        Ok(NetOutputs { features, pooled, logits, alpha, parts, part_inv, weights, rot_sums, beta })
    }

    /// Full inference on a raw cloud: labels, decoded rotations and shape.
    pub fn infer<T: Real>(
        &self,
        group: &RotationGroup,
        params: &ParamStore<T>,
        cloud: &[V3],
    ) -> Result<Inference, EquinetError> {
        let prepared = self.prepare(group, cloud)?;
        let mut g = Graph::new();
        let out = self.build(&mut g, params, group, &prepared.plan, None)?;
        let alpha = g.value(out.alpha).to_f64_vec();
        let p = self.layout.parts;
        let labels = alpha
            .chunks(p)
            .map(|row| row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best }))
            .collect();
        let weights = g.value(out.weights).to_f64_vec();
        let beta = g.value(out.beta).to_f64_vec();
        let pose = decode_pose(group, &self.tree()?, &weights, beta, prepared.normalization.centroid)?;
        Ok(Inference { pose, alpha, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{build_toy_body, sample_point_cloud, merge_parts, BodyConfig, BodyParams};
    use crate::group60::{angular_distance, build_icosahedral_group, Rotation};
    use crate::microtensor::grad_check_directional;
    use rand::Rng;

    fn body_cloud(n: usize, seed: u64) -> (BodyModel, PartMap, Vec<V3>, Vec<usize>) {
        let model = build_toy_body(&BodyConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BodyParams::rest(&model);
        for r in params.theta.iter_mut() {
            *r = Rotation::from_rotvec(V3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
        }
        let rec = sample_point_cloud(&model, &params, n, 0.005, seed).unwrap();
        let map = PartMap::for_joints(model.num_joints());
        let labels = merge_parts(&rec.labels, &map).unwrap();
        (model, map, rec.points, labels)
    }

    fn small_net(model: &BodyModel, map: &PartMap, channels: usize) -> EquiNet {
        let cfg = NetworkConfig { channels, ..NetworkConfig::default() };
        EquiNet::new(cfg, HeadLayout::from_body(model, map).unwrap()).unwrap()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn rotations_permute_the_group_axis() {
        let group = build_icosahedral_group();
        let (model, map, cloud, _) = body_cloud(300, 1);
        let net = small_net(&model, &map, 16);
        let params = net.init_params::<f64>(2);
        let base = net.prepare(&group, &cloud).unwrap();
        let mut g = Graph::new();
        let out = net.build(&mut g, &params, &group, &base.plan, None).unwrap();
        let f0 = g.value(out.features).to_f64_vec();
        let a0 = g.value(out.alpha).to_f64_vec();
        let b0 = g.value(out.beta).to_f64_vec();
        let w0 = g.value(out.weights).to_f64_vec();
        let (n, c, k) = (cloud.len(), 16, model.num_joints());
        for elem in [7, 23, 59] {
            let r = group.element(elem);
            let rotated: Vec<V3> = cloud.iter().map(|p| r.apply(p)).collect();
            let prep = net.prepare(&group, &rotated).unwrap();
            let mut g = Graph::new();
            let out = net.build(&mut g, &params, &group, &prep.plan, None).unwrap();
            let perm = group.permutation_of(elem).unwrap();
            // Expected: F'(i, π(j)) = F(i, j).
            let mut expect = vec![0.0; f0.len()];
            for i in 0..n {
                for j in 0..60 {
                    let (src, dst) = ((i * 60 + j) * c, (i * 60 + perm[j]) * c);
                    expect[dst..dst + c].copy_from_slice(&f0[src..src + c]);
                }
            }
            assert!(max_rel(&g.value(out.features).to_f64_vec(), &expect) < 1e-9);
            assert!(max_rel(&g.value(out.alpha).to_f64_vec(), &a0) < 1e-9);
            assert!(max_rel(&g.value(out.beta).to_f64_vec(), &b0) < 1e-9);
            let mut wexp = vec![0.0; w0.len()];
            for kk in 0..k {
                for j in 0..60 {
                    wexp[kk * 60 + perm[j]] = w0[kk * 60 + j];
                }
            }
            assert!(max_rel(&g.value(out.weights).to_f64_vec(), &wexp) < 1e-9);
        }
    }

    #[test]
    fn decoded_rotations_are_equivariant() {
        let group = build_icosahedral_group();
        let (model, map, cloud, _) = body_cloud(200, 3);
        let net = small_net(&model, &map, 8);
        let params = net.init_params::<f32>(4);
        let base = net.infer(&group, &params, &cloud).unwrap();
        let r = group.element(31);
        let rotated: Vec<V3> = cloud.iter().map(|p| r.apply(p)).collect();
        let moved = net.infer(&group, &params, &rotated).unwrap();
        assert_eq!(base.labels, moved.labels);
        for (a, b) in base.pose.global_rots.iter().zip(&moved.pose.global_rots) {
            assert!(angular_distance(&(r * a), b) < 1e-3);
        }
        for (a, b) in base.pose.beta_hat.iter().zip(&moved.pose.beta_hat) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn features_are_local() {
        let group = build_icosahedral_group();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // A long slab, so a receptive-field bound leaves distant points out.
        let cloud: Vec<V3> = (0..1200)
            .map(|_| V3::new(rng.random_range(-3.0..3.0), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
            .collect();
        let cfg = NetworkConfig { channels: 8, ..NetworkConfig::default() };
        let layout = HeadLayout::new(vec![None], vec![0], 1, 1).unwrap();
        let net = EquiNet::new(cfg.clone(), layout).unwrap();
        let params = net.init_params::<f64>(6);
        let bound = 2.0 * cfg.kernel_radius * cfg.stride as f64;
        let run = |input: &[f64]| {
            let plan = GeometryPlan::new(&group, &cloud, input, &cfg).unwrap();
            let mut g = Graph::new();
            let f = spconv_forward(&mut g, &params, &plan, 8).unwrap();
            g.value(f).to_f64_vec()
        };
        let full = run(&vec![1.0; cloud.len()]);
        let far: Vec<f64> = cloud.iter().map(|p| if (p - cloud[0]).norm() > bound { 0.0 } else { 1.0 }).collect();
        assert!(far.iter().filter(|v| **v == 0.0).count() > 600);
        let cut = run(&far);
        let row = 60 * 8;
        let diff = full[..row].iter().zip(&cut[..row]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-6, "{diff}");
        assert!(full[..row].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let group = build_icosahedral_group();
        let (model, map, cloud, _) = body_cloud(150, 7);
        let net = small_net(&model, &map, 8);
        let p1 = net.init_params::<f32>(8);
        let p2 = net.init_params::<f32>(8);
        let a = net.infer(&group, &p1, &cloud).unwrap();
        let b = net.infer(&group, &p2, &cloud).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.pose.beta_hat, b.pose.beta_hat);
    }

    #[test]
    fn paper_sized_network_stays_small() {
        let model = build_toy_body(&BodyConfig { joints: 22, ..BodyConfig::default() }).unwrap();
        let map = PartMap::for_joints(22);
        let net = small_net(&model, &map, 64);
        let count = net.param_count();
        assert!(count > 100_000 && count < 2_000_000, "{count}");
        assert_eq!(net.init_params::<f32>(0).num_scalars(), count);
    }

    #[test]
    fn parameter_gradients_match_differences() {
        let group = build_icosahedral_group();
        let (model, map, cloud, labels) = body_cloud(64, 9);
        let cfg = NetworkConfig { channels: 4, heads: 2, embed: 8, hidden: 8, neighbor_cap: 16, ..NetworkConfig::default() };
        let net = EquiNet::new(cfg, HeadLayout::from_body(&model, &map).unwrap()).unwrap();
        let params = net.init_params::<f64>(10);
        let prep = net.prepare(&group, &cloud).unwrap();
        let target: Vec<f64> = (0..model.num_joints() * 9).map(|i| ((i * 7) % 5) as f64 * 0.1).collect();
        let err = grad_check_directional(
            |g, p| {
                let out = net.build(g, p, &group, &prep.plan, None).map_err(|e| crate::microtensor::TensorError::InvalidArgument(e.to_string()))?;
                let t = g.constant(Tensor::from_f64(&[model.num_joints(), 3, 3], &target)?)?;
                let l1 = g.mse_loss(out.rot_sums, t)?;
                let l2 = g.cross_entropy_loss(out.logits, &labels)?;
                let bsum = g.sum(out.beta, 0)?;
                let l3 = g.mul(bsum, bsum)?;
                let s = g.add(l1, l2)?;
                g.add(s, l3)
            },
            &params,
            1e-7,
            3,
            1e-5,
            11,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
