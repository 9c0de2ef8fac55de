use nalgebra::Vector3;
use std::collections::HashMap;

use super::rotation::{angular_distance, Rotation};
use super::GroupError;

/// Number of elements of the icosahedral rotation group.
pub const GROUP_ORDER: usize = 60;

/// Fixed-point key used to identify matrices that agree up to rounding.
type MatrixKey = [i64; 9];

fn key_of(r: &Rotation) -> MatrixKey {
    let mut key = [0i64; 9];
    for (k, v) in key.iter_mut().zip(r.to_row_major()) {
        *k = (v * 1e6).round() as i64;
    }
    key
}

/// The 60 rotational symmetries of the icosahedron with their Cayley table.
///
/// `perm[k]` is the left-multiplication action of element `k` on element
/// indices: `R(g_k) R(g_j) = R(g_{perm[k][j]})`. Rotating a point cloud by
/// `R(g_k)` permutes the group axis of an equivariant feature map by this
/// table.
#[derive(Clone, Debug)]
pub struct RotationGroup {
    elements: Vec<Rotation>,
    cayley: Vec<[u8; GROUP_ORDER]>,
    inverse: Vec<usize>,
}

impl RotationGroup {
    pub fn elements(&self) -> &[Rotation] {
        &self.elements
    }

    pub fn element(&self, j: usize) -> &Rotation {
        &self.elements[j]
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Index of `R(g_i) R(g_j)`.
    pub fn compose(&self, i: usize, j: usize) -> usize {
        self.cayley[i][j] as usize
    }

    pub fn inverse(&self, i: usize) -> usize {
        self.inverse[i]
    }

    pub fn cayley(&self) -> &[[u8; GROUP_ORDER]] {
        &self.cayley
    }

    /// Permutation `π_k` with `R(g_k) R(g_j) = R(g_{π_k(j)})`.
    pub fn permutation_of(&self, k: usize) -> Result<Vec<usize>, GroupError> {
        if k >= self.len() {
            return Err(GroupError::IndexOutOfRange { index: k, len: self.len() });
        }
        Ok(self.cayley[k].iter().map(|&v| v as usize).collect())
    }

    /// Nearest group element in chordal distance; ties go to the smallest index.
    pub fn quantize(&self, r: &Rotation) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, g) in self.elements.iter().enumerate() {
            let d = r.chordal_distance(g);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    /// Assembles a group from raw parts, recomputing the inverse table.
    /// No closure check is made here; see [`RotationGroup::validate`].
    pub fn from_parts(elements: Vec<Rotation>, cayley: Vec<[u8; GROUP_ORDER]>) -> Result<Self, GroupError> {
        if elements.len() != GROUP_ORDER || cayley.len() != GROUP_ORDER {
            return Err(GroupError::Malformed(format!(
                "expected {GROUP_ORDER} elements, got {} elements and {} table rows",
                elements.len(),
                cayley.len()
            )));
        }
        let mut inverse = vec![usize::MAX; GROUP_ORDER];
        for (i, row) in cayley.iter().enumerate() {
            if let Some(j) = row.iter().position(|&v| v == 0) {
                inverse[i] = j;
            }
        }
        Ok(RotationGroup { elements, cayley, inverse })
    }

    /// Checks the structural invariants and reports the first violation.
    pub fn validate(&self) -> Result<(), GroupError> {
        let id = Rotation::identity();
        if self.elements[0].chordal_distance(&id) > 1e-9 {
            return Err(GroupError::Invariant("element 0 is not the identity".into()));
        }
        for i in 0..GROUP_ORDER {
            for j in 0..GROUP_ORDER {
                let prod = self.elements[i] * self.elements[j];
                let idx = self.cayley[i][j] as usize;
                if idx >= GROUP_ORDER || prod.chordal_distance(&self.elements[idx]) > 1e-9 {
                    return Err(GroupError::Invariant(format!("closure fails at ({i}, {j})")));
                }
            }
            let inv = self.inverse[i];
            if inv >= GROUP_ORDER || (self.elements[i] * self.elements[inv]).chordal_distance(&id) > 1e-9 {
                return Err(GroupError::Invariant(format!("element {i} has no inverse in the table")));
            }
            let mut seen = [false; GROUP_ORDER];
            for &v in self.cayley[i].iter() {
                seen[v as usize] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(GroupError::Invariant(format!("row {i} of the Cayley table is not a permutation")));
            }
        }
        let min = self.min_pairwise_angle();
        if min < 72f64.to_radians() - 1e-6 {
            return Err(GroupError::Invariant(format!("elements closer than 72°: {}", min.to_degrees())));
        }
        Ok(())
    }

    pub fn min_pairwise_angle(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                min = min.min(angular_distance(&self.elements[i], &self.elements[j]));
            }
        }
        min
    }

    /// Histogram of element rotation angles, in whole degrees.
    pub fn angle_histogram(&self) -> Vec<(u32, usize)> {
        let mut hist: Vec<(u32, usize)> = Vec::new();
        for g in &self.elements {
            let deg = g.angle().to_degrees().round() as u32;
            match hist.iter_mut().find(|(a, _)| *a == deg) {
                Some(e) => e.1 += 1,
                None => hist.push((deg, 1)),
            }
        }
        hist.sort();
        hist
    }
}

/// Builds the icosahedral rotation group in canonical order.
///
/// Elements are generated from a 5-fold rotation about a vertex axis and a
/// 3-fold rotation about a face axis, closed under multiplication, and sorted
/// with the identity first followed by the lexicographic order of the rounded
/// row-major entries.
pub fn build_icosahedral_group() -> RotationGroup {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let gens = [
        Rotation::from_axis_angle(Vector3::new(0.0, 1.0, phi), 72f64.to_radians()),
        Rotation::from_axis_angle(Vector3::new(1.0, 1.0, 1.0), 120f64.to_radians()),
    ];

    let mut found: Vec<Rotation> = vec![Rotation::identity()];
    let mut keys: HashMap<MatrixKey, usize> = HashMap::new();
    keys.insert(key_of(&found[0]), 0);
    let mut frontier = 0;
    while frontier < found.len() {
        let current = found[frontier];
        frontier += 1;
        for g in &gens {
            let next = current * *g;
            let k = key_of(&next);
            if let std::collections::hash_map::Entry::Vacant(e) = keys.entry(k) {
                e.insert(found.len());
                found.push(next);
            }
        }
    }
    assert_eq!(found.len(), GROUP_ORDER, "icosahedral closure produced {} elements", found.len());

    // Snap to an orthonormal matrix to remove accumulated product error.
    let mut elements: Vec<Rotation> = found
        .into_iter()
        .map(|r| {
            let svd = r.matrix().svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            Rotation::from_matrix_unchecked(u * vt)
        })
        .collect();
    let id_key = key_of(&Rotation::identity());
    elements.sort_by(|a, b| {
        let (ka, kb) = (key_of(a), key_of(b));
        (ka != id_key).cmp(&(kb != id_key)).then(ka.cmp(&kb))
    });

    let index: HashMap<MatrixKey, usize> = elements.iter().enumerate().map(|(i, r)| (key_of(r), i)).collect();
    let mut cayley = vec![[0u8; GROUP_ORDER]; GROUP_ORDER];
    for i in 0..GROUP_ORDER {
        for j in 0..GROUP_ORDER {
            let prod = elements[i] * elements[j];
            cayley[i][j] = index[&key_of(&prod)] as u8;
        }
    }
    RotationGroup::from_parts(elements, cayley).expect("canonical group has 60 elements")
}
