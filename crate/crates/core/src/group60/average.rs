use nalgebra::{Matrix3, Vector3};

use super::group::{RotationGroup, GROUP_ORDER};
use super::rotation::Rotation;
use super::GroupError;

/// Relative singular-value gap below which the nearest rotation is not unique.
pub const DEGENERACY_RATIO: f64 = 1e-8;

/// Nonnegative weights over the 60 group elements.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights(Vec<f64>);

impl GroupWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, GroupError> {
        if w.len() != GROUP_ORDER {
            return Err(GroupError::Malformed(format!("expected {GROUP_ORDER} weights, got {}", w.len())));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GroupError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        Ok(GroupWeights(w))
    }

    pub fn one_hot(j: usize) -> Self {
        let mut w = vec![0.0; GROUP_ORDER];
        w[j] = 1.0;
        GroupWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Reindexes by `w'[perm[j]] = w[j]`, the action of a left group multiplication.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = vec![0.0; self.0.len()];
        for (j, &p) in perm.iter().enumerate() {
            out[p] = self.0[j];
        }
        GroupWeights(out)
    }
}

/// Nearest rotation to `a` in Frobenius norm: `U diag(1, 1, det(UVᵀ)) Vᵀ`.
pub fn project_to_so3(a: &Matrix3<f64>) -> Result<Rotation, GroupError> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(GroupError::NonFinite);
    }
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..3).collect();
    s.sort_by(|x, y| y.0.total_cmp(&x.0));
    let largest = s[0].0;
    if s[1].0 < DEGENERACY_RATIO * (largest + 1e-30) && s[2].0 < DEGENERACY_RATIO * (largest + 1e-30) {
        return Err(GroupError::DegenerateMean { singular_values: [s[0].0, s[1].0, s[2].0] });
    }
    // Flip the column paired with the smallest singular value when needed.
    let d = (u * vt).determinant().signum();
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    diag[s[2].1] = if d < 0.0 { -1.0 } else { 1.0 };
    let r = u * Matrix3::from_diagonal(&diag) * vt;
    Ok(Rotation::from_matrix_unchecked(r))
}

/// Weighted chordal L2 mean of the group elements.
///
/// The weights are normalized to unit sum first, so the result does not
/// depend on their overall scale. A numerically vanishing weighted sum is
/// reported as [`GroupError::DegenerateMean`], as is a sum whose two smaller
/// singular values collapse.
pub fn chordal_weighted_mean(group: &RotationGroup, w: &GroupWeights) -> Result<Rotation, GroupError> {
    let total: f64 = w.0.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(GroupError::InvalidWeights(format!("weight sum must be positive, got {total}")));
    }
    let a = weighted_sum(group, w.as_slice(), 1.0 / total);
    let svals = a.singular_values();
    let largest = svals.max();
    if largest < DEGENERACY_RATIO {
        let mut s = [svals[0], svals[1], svals[2]];
        s.sort_by(|x, y| y.total_cmp(x));
        return Err(GroupError::DegenerateMean { singular_values: s });
    }
    project_to_so3(&a)
}

/// `scale · Σ_j w_j R(g_j)`.
pub fn weighted_sum(group: &RotationGroup, w: &[f64], scale: f64) -> Matrix3<f64> {
    let mut a = Matrix3::zeros();
    for (g, &wj) in group.elements().iter().zip(w) {
        a += g.matrix() * (wj * scale);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group60::{angular_distance, build_icosahedral_group};

    #[test]
    fn one_hot_returns_element() {
        let g = build_icosahedral_group();
        for j in [0, 5, 33, 59] {
            let r = chordal_weighted_mean(&g, &GroupWeights::one_hot(j)).unwrap();
            assert!(angular_distance(&r, g.element(j)) < 1e-9);
        }
    }

    #[test]
    fn uniform_weights_are_degenerate() {
        let g = build_icosahedral_group();
        let w = GroupWeights::new(vec![1.0; 60]).unwrap();
        assert!(matches!(chordal_weighted_mean(&g, &w), Err(GroupError::DegenerateMean { .. })));
    }

    #[test]
    fn midpoint_of_identity_and_fivefold() {
        let g = build_icosahedral_group();
        // Locate a 72° element and its axis.
        let j = (1..60).find(|&j| (g.element(j).angle().to_degrees() - 72.0).abs() < 1e-6).unwrap();
        let axis = g.element(j).to_rotvec().normalize();
        let mut w = vec![0.0; 60];
        w[0] = 1.0;
        w[j] = 1.0;
        let mean = chordal_weighted_mean(&g, &GroupWeights::new(w).unwrap()).unwrap();

        // Brute force over a 0.01° grid of angles about the same axis.
        let objective = |r: &Rotation| {
            r.chordal_distance(g.element(0)).powi(2) + r.chordal_distance(g.element(j)).powi(2)
        };
        let (mut best_deg, mut best) = (0.0, f64::INFINITY);
        for step in 0..=7200 {
            let deg = step as f64 * 0.01;
            let v = objective(&Rotation::from_axis_angle(axis, deg.to_radians()));
            if v < best {
                best = v;
                best_deg = deg;
            }
        }
        assert!((best_deg - 36.0f64).abs() < 0.011);
        let expected = Rotation::from_axis_angle(axis, 36f64.to_radians());
        assert!(angular_distance(&mean, &expected) < 1e-9);
    }

    #[test]
    fn projection_fixes_rotations_and_scaling() {
        let r = Rotation::from_axis_angle(Vector3::new(0.2, -1.0, 0.4), 2.2);
        let p = project_to_so3(r.matrix()).unwrap();
        assert!(angular_distance(&p, &r) < 1e-9);
        let p = project_to_so3(&(r.matrix() * 2.5)).unwrap();
        assert!(angular_distance(&p, &r) < 1e-9);
    }

    #[test]
    fn projection_of_reflection_attains_minimum() {
        // diag(1, 1, -1) has a whole family of nearest rotations, {(I - 2uuᵀ)a},
        // containing the identity and the half turns about in-plane axes.
        let a = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r = project_to_so3(&a).unwrap();
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        assert!(((a - r.matrix()).norm() - 2.0).abs() < 1e-9);
        let half_turn = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, -1.0));
        assert!(((a - half_turn).norm() - 2.0).abs() < 1e-12);
        // No sampled rotation gets closer to `a` than the projection.
        let best = (a - r.matrix()).norm();
        let g = build_icosahedral_group();
        for s in 0..2000 {
            let t = s as f64 * 0.01;
            let cand = Rotation::from_rotvec(Vector3::new(t.sin(), (1.7 * t).cos(), (0.3 * t).sin()) * (t % 3.14))
                * *g.element(s % 60);
            assert!((a - cand.matrix()).norm() >= best - 1e-9);
        }
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        assert!(matches!(project_to_so3(&Matrix3::zeros()), Err(GroupError::DegenerateMean { .. })));
    }

    #[test]
    fn scale_invariance() {
        let g = build_icosahedral_group();
        let w: Vec<f64> = (0..60).map(|j| ((j * 7919) % 13) as f64 + 0.5).collect();
        let a = chordal_weighted_mean(&g, &GroupWeights::new(w.clone()).unwrap()).unwrap();
        let b = chordal_weighted_mean(&g, &GroupWeights::new(w.iter().map(|v| v * 37.0).collect()).unwrap()).unwrap();
        assert!(angular_distance(&a, &b) < 1e-9);
    }
}
