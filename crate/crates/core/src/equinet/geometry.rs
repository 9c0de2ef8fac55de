use std::sync::Arc;

use nalgebra::Vector3;

use super::{EquinetError, NetworkConfig};
use crate::group60::RotationGroup;
use crate::microtensor::Csr;

type V3 = Vector3<f64>;

/// Fixed body height used to bring clouds to unit scale. A per-cloud scale
/// would erase the stature information the shape head has to recover.
pub const NOMINAL_HEIGHT: f64 = 1.7;

/// Number of kernel points: the centre plus the 12 icosahedron vertices.
pub const KERNEL_POINTS: usize = 13;

/// Gain on the neighbour-averaged kernel correlations. A plain average
/// leaves layer outputs an order of magnitude below unit variance.
pub const CORRELATION_SCALE: f64 = 5.0;

/// Offset and scale that map a raw cloud to network coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: V3,
    pub scale: f64,
}

impl Normalization {
    pub fn to_network(&self, p: &V3) -> V3 {
        (p - self.centroid) * self.scale
    }

    pub fn to_world(&self, p: &V3) -> V3 {
        p / self.scale + self.centroid
    }
}

/// Centroid-centres a cloud and divides by [`NOMINAL_HEIGHT`].
pub fn normalize_cloud(points: &[V3]) -> Result<(Vec<V3>, Normalization), EquinetError> {
    if points.is_empty() {
        return Err(EquinetError::TooFewPoints { got: 0, need: 1 });
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(EquinetError::NonFinite);
    }
    let centroid = points.iter().sum::<V3>() / points.len() as f64;
    let norm = Normalization { centroid, scale: 1.0 / NOMINAL_HEIGHT };
    Ok((points.iter().map(|p| norm.to_network(p)).collect(), norm))
}

/// Greedy farthest-point sampling of `m` indices, starting from index 0.
/// Ties go to the smallest index.
pub fn farthest_point_sampling(points: &[V3], m: usize) -> Vec<usize> {
    let m = m.min(points.len());
    if m == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut cur = 0;
    for _ in 0..m {
        chosen.push(cur);
        let c = points[cur];
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.1 {
                best = (i, dist[i]);
            }
        }
        cur = best.0;
    }
    chosen
}

/// The first `cap` indices (in index order) of `points` within `radius` of
/// `center`. Index order is untouched by rotations and, for clouds sampled
/// in random order, spreads the neighbours over the whole ball.
pub fn ball_query(points: &[V3], center: &V3, radius: f64, cap: usize) -> Vec<usize> {
    let r2 = radius * radius;
    points.iter().enumerate().filter(|(_, p)| (*p - center).norm_squared() <= r2).map(|(i, _)| i).take(cap).collect()
}

/// The `k` smallest `(distance, index)` pairs in ascending order.
fn nearest(mut hits: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if hits.len() > k && k > 0 {
        hits.select_nth_unstable_by(k - 1, cmp);
    }
    hits.truncate(k);
    hits.sort_by(cmp);
    hits.into_iter().map(|(_, i)| i).collect()
}

/// Centre plus the 12 vertices of an icosahedron of circumradius `radius`.
pub fn kernel_points(radius: f64) -> Vec<V3> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut pts = vec![V3::zeros()];
    for (a, b) in [(1.0, phi), (-1.0, phi), (1.0, -phi), (-1.0, -phi)] {
        pts.push(V3::new(0.0, a, b));
        pts.push(V3::new(a, b, 0.0));
        pts.push(V3::new(b, 0.0, a));
    }
    for p in pts.iter_mut().skip(1) {
        *p = p.normalize() * radius;
    }
    pts
}

/// Linear-decay correlation weight, zero beyond `support`.
pub fn kernel_weight(d: f64, support: f64) -> f64 {
    (1.0 - d / support).max(0.0)
}

/// Everything about a cloud that depends only on its geometry: the
/// downsampled point sets, the kernel correlations of both convolution
/// layers and the interpolation back to the input points.
#[derive(Clone, Debug)]
pub struct GeometryPlan {
    pub n_points: usize,
    /// Layer-1 centres, as indices into the input.
    pub level1: Vec<usize>,
    /// Layer-2 centres, as indices into `level1`.
    pub level2: Vec<usize>,
    /// Layer-1 correlations `[N1·M, 13]`, already multiplied by the input features.
    pub layer1: Vec<f64>,
    /// Layer-2 correlations: rows `(i, j, a)`, columns `(n, j)` over `N1·M`.
    pub layer2: Arc<Csr>,
    /// Inverse-distance interpolation `[N, N2]`.
    pub propagate: Arc<Csr>,
    pub group_order: usize,
}

impl GeometryPlan {
    /// Builds the plan for a normalized cloud. `input` holds one scalar
    /// feature per point (all ones for plain clouds).
    pub fn new(group: &RotationGroup, cloud: &[V3], input: &[f64], cfg: &NetworkConfig) -> Result<Self, EquinetError> {
        let n = cloud.len();
        if n < cfg.neighbor_cap.max(3) {
            return Err(EquinetError::TooFewPoints { got: n, need: cfg.neighbor_cap.max(3) });
        }
        if input.len() != n {
            return Err(EquinetError::Shape(format!("{} input features for {n} points", input.len())));
        }
        if cloud.iter().any(|p| !p.iter().all(|v| v.is_finite())) || input.iter().any(|v| !v.is_finite()) {
            return Err(EquinetError::NonFinite);
        }
        let m = group.len();
        let r = cfg.kernel_radius;
        let support = r * 0.5;
        let kernels = kernel_points(r / 2.0);
        let rotated: Vec<Vec<V3>> = group.elements().iter().map(|g| kernels.iter().map(|k| g.apply(k)).collect()).collect();

        let n1 = n.div_ceil(cfg.stride);
        let level1 = farthest_point_sampling(cloud, n1);
        let pts1: Vec<V3> = level1.iter().map(|&i| cloud[i]).collect();
        let n2 = n1.div_ceil(cfg.stride);
        let level2 = farthest_point_sampling(&pts1, n2);
        let pts2: Vec<V3> = level2.iter().map(|&i| pts1[i]).collect();

        let s2 = support * support;
        let mut layer1 = vec![0.0; n1 * m * KERNEL_POINTS];
        for (i, c) in pts1.iter().enumerate() {
            let nbrs = ball_query(cloud, c, r, cfg.neighbor_cap);
            let norm = CORRELATION_SCALE / nbrs.len() as f64;
            for &nb in &nbrs {
                let delta = cloud[nb] - c;
                for (j, ks) in rotated.iter().enumerate() {
                    let out = &mut layer1[(i * m + j) * KERNEL_POINTS..(i * m + j + 1) * KERNEL_POINTS];
                    for (o, k) in out.iter_mut().zip(ks) {
                        let d2 = (k - delta).norm_squared();
                        if d2 < s2 {
                            *o += kernel_weight(d2.sqrt(), support) * norm * input[nb];
                        }
                    }
                }
            }
        }

        let mut layer2 = Csr::builder(n1 * m);
        for c in &pts2 {
            let nbrs = ball_query(&pts1, c, r, cfg.neighbor_cap);
            let norm = CORRELATION_SCALE / nbrs.len() as f64;
            let deltas: Vec<(usize, V3)> = nbrs.iter().map(|&nb| (nb, pts1[nb] - c)).collect();
            for (j, ks) in rotated.iter().enumerate() {
                for k in ks {
                    for (nb, delta) in &deltas {
                        let d2 = (k - delta).norm_squared();
                        let w = if d2 < s2 { kernel_weight(d2.sqrt(), support) } else { 0.0 };
                        if w > 0.0 {
                            layer2.push(nb * m + j, w * norm);
                        }
                    }
                    layer2.end_row();
                }
            }
        }
        let layer2 = Arc::new(layer2.build());

        let k_nn = 3.min(n2);
        let prop_rows: Vec<Vec<(usize, f64)>> = cloud
            .iter()
            .map(|p| {
                let idx = nearest(pts2.iter().enumerate().map(|(i, q)| ((p - q).norm_squared(), i)).collect(), k_nn);
                let inv: Vec<f64> = idx.iter().map(|&i| 1.0 / ((p - pts2[i]).norm() + 1e-8)).collect();
                let total: f64 = inv.iter().sum();
                idx.iter().zip(&inv).map(|(&i, w)| (i, w / total)).collect()
            })
            .collect();
        let propagate = Arc::new(Csr::from_rows(n2, &prop_rows));

        Ok(GeometryPlan { n_points: n, level1, level2, layer1, layer2, propagate, group_order: m })
    }

    pub fn n1(&self) -> usize {
        self.level1.len()
    }

    pub fn n2(&self) -> usize {
        self.level2.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group60::build_icosahedral_group;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<V3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| V3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).collect()
    }

    #[test]
    fn kernel_is_a_group_orbit() {
        let g = build_icosahedral_group();
        let ks = kernel_points(0.2);
        assert_eq!(ks.len(), KERNEL_POINTS);
        for e in g.elements() {
            for k in &ks {
                let r = e.apply(k);
                assert!(ks.iter().any(|q| (q - r).norm() < 1e-12));
            }
        }
    }

    #[test]
    fn fps_is_spread_out() {
        let pts = cloud(400, 1);
        let idx = farthest_point_sampling(&pts, 50);
        assert_eq!(idx[0], 0);
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 50);
        // Every point lies within the covering radius implied by the last pick.
        let sel: Vec<V3> = idx.iter().map(|&i| pts[i]).collect();
        let cover = pts.iter().map(|p| sel.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
        let min_sep = (0..50)
            .flat_map(|a| (0..a).map(move |b| (a, b)))
            .map(|(a, b)| (sel[a] - sel[b]).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(cover <= min_sep + 1e-12);
    }

    #[test]
    fn ball_query_takes_the_first_hits() {
        let pts = cloud(300, 2);
        let c = pts[5];
        let all: Vec<usize> = (0..300).filter(|&i| (pts[i] - c).norm() <= 0.3).collect();
        assert!(all.len() > 10);
        assert_eq!(ball_query(&pts, &c, 0.3, 10), all[..10]);
        assert_eq!(ball_query(&pts, &c, 0.3, 1000), all);
    }

    #[test]
    fn propagation_rows_are_convex() {
        let g = build_icosahedral_group();
        let pts = cloud(200, 3);
        let plan = GeometryPlan::new(&g, &pts, &vec![1.0; 200], &NetworkConfig::default()).unwrap();
        assert_eq!(plan.n1(), 100);
        assert_eq!(plan.n2(), 50);
        for r in 0..200 {
            let s: f64 = plan.propagate.row(r).map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        let g = build_icosahedral_group();
        let pts = cloud(10, 4);
        assert!(matches!(
            GeometryPlan::new(&g, &pts, &[1.0; 10], &NetworkConfig::default()),
            Err(EquinetError::TooFewPoints { .. })
        ));
    }
}
