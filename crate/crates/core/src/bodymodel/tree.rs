use nalgebra::Matrix3;

use super::BodyError;
use crate::group60::Rotation;

/// Joint hierarchy in topological order: joint 0 is the root and every
/// parent index is smaller than its child's.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KinematicTree {
    parent: Vec<Option<usize>>,
    names: Vec<String>,
}

impl KinematicTree {
    pub fn new(parent: Vec<Option<usize>>, names: Vec<String>) -> Result<Self, BodyError> {
        if parent.is_empty() || parent.len() != names.len() {
            return Err(BodyError::InvalidTree("need one name per joint and at least one joint".into()));
        }
        if parent[0].is_some() {
            return Err(BodyError::InvalidTree("joint 0 must be the root".into()));
        }
        for (k, p) in parent.iter().enumerate().skip(1) {
            match p {
                None => return Err(BodyError::InvalidTree(format!("joint {k} is a second root"))),
                Some(p) if *p >= k => {
                    return Err(BodyError::InvalidTree(format!("joint {k} has parent {p}, not topologically ordered")))
                }
                _ => {}
            }
        }
        Ok(KinematicTree { parent, names })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parent[k]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Parent index with the root mapped to itself.
    pub fn parent_or_self(&self, k: usize) -> usize {
        self.parent[k].unwrap_or(k)
    }

    pub fn children(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.parent[c] == Some(k)).collect()
    }

    /// Joints on the path from the root to `k`, root first, `k` last.
    pub fn path_to(&self, k: usize) -> Vec<usize> {
        let mut path = vec![k];
        let mut cur = k;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Global rotations from local ones: `G_k = G_parent(k) · θ_k`.
    pub fn accumulate(&self, local: &[Rotation]) -> Vec<Rotation> {
        let mut global: Vec<Rotation> = Vec::with_capacity(local.len());
        for (k, l) in local.iter().enumerate() {
            let g = match self.parent[k] {
                Some(p) => global[p] * *l,
                None => *l,
            };
            global.push(g);
        }
        global
    }

    /// Inverse of [`accumulate`](Self::accumulate): `θ_k = G_parent(k)ᵀ · G_k`.
    pub fn local_from_global(&self, global: &[Rotation]) -> Vec<Rotation> {
        (0..global.len())
            .map(|k| match self.parent[k] {
                Some(p) => global[p].transpose() * global[k],
                None => global[k],
            })
            .collect()
    }

    /// As [`local_from_global`](Self::local_from_global) for raw matrices.
    pub fn local_from_global_matrices(&self, global: &[Matrix3<f64>]) -> Vec<Matrix3<f64>> {
        (0..global.len())
            .map(|k| match self.parent[k] {
                Some(p) => global[p].transpose() * global[k],
                None => global[k],
            })
            .collect()
    }
}
