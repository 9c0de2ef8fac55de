use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};

use super::model::BodyParams;
use super::sample::{PartMap, SampleRecord};
use super::toy::BodyConfig;
use super::tree::KinematicTree;
use super::BodyError;
use crate::group60::project_to_so3;

type V3 = Vector3<f64>;

pub const DATASET_MAGIC: &[u8; 4] = b"AQD1";
pub const DATASET_VERSION: u32 = 1;

/// Everything needed to interpret and reproduce the records of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub body: BodyConfig,
    pub part_map: PartMap,
    pub n_points: usize,
    pub n_vertices: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Records with labels already merged into supervised parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SampleRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend((v as f32).to_le_bytes());
    }
}

fn flat(points: &[V3]) -> impl Iterator<Item = f64> + '_ {
    points.iter().flat_map(|p| [p.x, p.y, p.z])
}

/// Serializes to the little-endian `AQD1` layout: magic, version, header
/// fields, `u32` record count, then fixed-size records of `f32` points,
/// `u8` labels, `f32` β, θ (row-major 3×3 per joint) and translation, and
/// `f32` ground-truth vertices and joints.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, BodyError> {
    let h = &ds.header;
    if h.part_map.parts() > 256 {
        return Err(BodyError::InvalidConfig("labels must fit in a byte".into()));
    }
    let mut out = Vec::new();
    out.extend(DATASET_MAGIC);
    out.extend(DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, h.body.joints);
    put_u32(&mut out, h.body.vertices);
    put_u32(&mut out, h.body.betas);
    out.extend(h.body.pose_corrective_scale.to_le_bytes());
    out.extend(h.body.seed.to_le_bytes());
    put_u32(&mut out, h.part_map.parts());
    put_u32(&mut out, h.part_map.fine());
    out.extend(h.part_map.as_slice().iter().map(|&p| p as u8));
    put_u32(&mut out, h.n_points);
    put_u32(&mut out, h.n_vertices);
    out.extend(h.noise.to_le_bytes());
    out.extend(h.seed.to_le_bytes());
    put_u32(&mut out, ds.records.len());
    let k = h.body.joints;
    for (i, r) in ds.records.iter().enumerate() {
        let sizes_ok = r.points.len() == h.n_points
            && r.labels.len() == h.n_points
            && r.gt_params.beta.len() == h.body.betas
            && r.gt_params.theta.len() == k
            && r.gt_vertices.len() == h.n_vertices
            && r.gt_joints.len() == k;
        if !sizes_ok {
            return Err(BodyError::InvalidConfig(format!("record {i} does not match the header sizes")));
        }
        put_f32s(&mut out, flat(&r.points));
        for &l in &r.labels {
            if l >= h.part_map.parts() {
                return Err(BodyError::UnmappedLabel(l));
            }
            out.push(l as u8);
        }
        put_f32s(&mut out, r.gt_params.beta.iter().copied());
        put_f32s(&mut out, r.gt_params.theta.iter().flat_map(|t| t.to_row_major()));
        put_f32s(&mut out, [r.gt_params.trans.x, r.gt_params.trans.y, r.gt_params.trans.z]);
        put_f32s(&mut out, flat(&r.gt_vertices));
        put_f32s(&mut out, flat(&r.gt_joints));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BodyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| BodyError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, BodyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, BodyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, BodyError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, BodyError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| BodyError::Malformed("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    fn points(&mut self, n: usize) -> Result<Vec<V3>, BodyError> {
        Ok(self.f32s(n * 3)?.chunks_exact(3).map(|c| V3::new(c[0], c[1], c[2])).collect())
    }
}

/// Parses an `AQD1` blob. Stored rotations are re-projected onto SO(3)
/// since `f32` storage is not exactly orthonormal, and ground-truth global
/// rotations are rebuilt from them along `tree`.
pub fn decode_dataset(bytes: &[u8], tree: &KinematicTree) -> Result<Dataset, BodyError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(BodyError::Malformed("bad magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION as usize {
        return Err(BodyError::Malformed(format!("unsupported version {version}")));
    }
    let body = BodyConfig {
        joints: r.u32()?,
        vertices: r.u32()?,
        betas: r.u32()?,
        pose_corrective_scale: r.f64()?,
        seed: r.u64()?,
    };
    if body.joints != tree.len() {
        return Err(BodyError::Malformed(format!("dataset has {} joints, body has {}", body.joints, tree.len())));
    }
    let parts = r.u32()?;
    let fine = r.u32()?;
    if fine != body.joints {
        return Err(BodyError::Malformed("part map does not cover every joint".into()));
    }
    let map = r.take(fine)?.iter().map(|&b| b as usize).collect();
    let part_map = PartMap::new(map, parts).map_err(|e| BodyError::Malformed(e.to_string()))?;
    let n_points = r.u32()?;
    let n_vertices = r.u32()?;
    let noise = r.f64()?;
    let seed = r.u64()?;
    let count = r.u32()?;
    let k = body.joints;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let points = r.points(n_points)?;
        let labels: Vec<usize> = r.take(n_points)?.iter().map(|&b| b as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= parts) {
            return Err(BodyError::Malformed(format!("label {bad} out of range {parts}")));
        }
        let beta = r.f32s(body.betas)?;
        let theta = r
            .f32s(9 * k)?
            .chunks_exact(9)
            .map(|c| project_to_so3(&Matrix3::from_row_slice(c)).map_err(|e| BodyError::Malformed(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let t = r.f32s(3)?;
        let gt_params = BodyParams { beta, theta, trans: V3::new(t[0], t[1], t[2]) };
        let gt_vertices = r.points(n_vertices)?;
        let gt_joints = r.points(k)?;
        let gt_global_rots = tree.accumulate(&gt_params.theta);
        records.push(SampleRecord { points, labels, gt_params, gt_vertices, gt_joints, gt_global_rots });
    }
    if r.pos != bytes.len() {
        return Err(BodyError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Dataset { header: DatasetHeader { body, part_map, n_points, n_vertices, noise, seed }, records })
}

/// Reads only the body configuration from the start of an `AQD1` blob.
pub fn peek_body_config(bytes: &[u8]) -> Result<BodyConfig, BodyError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(BodyError::Malformed("bad magic".into()));
    }
    r.u32()?;
    Ok(BodyConfig { joints: r.u32()?, vertices: r.u32()?, betas: r.u32()?, pose_corrective_scale: r.f64()?, seed: r.u64()? })
}

pub fn write_dataset(path: &std::path::Path, ds: &Dataset) -> Result<(), BodyError> {
    let bytes = encode_dataset(ds)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &std::path::Path, tree: &KinematicTree) -> Result<Dataset, BodyError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes, tree)
}

/// ASCII Wavefront OBJ with 1-based face indices.
pub fn write_obj<W: Write>(mut w: W, vertices: &[V3], faces: &[[usize; 3]]) -> std::io::Result<()> {
    for v in vertices {
        writeln!(w, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z)?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{build_toy_body, merge_parts, sample_point_cloud, DEFAULT_NOISE};
    use crate::group60::Rotation;

    fn small() -> (crate::bodymodel::BodyModel, Dataset) {
        let cfg = BodyConfig { vertices: 800, ..Default::default() };
        let m = build_toy_body(&cfg).unwrap();
        let map = PartMap::for_joints(16);
        let mut records = Vec::new();
        for s in 0..3 {
            let mut p = BodyParams::rest(&m);
            p.theta[5] = Rotation::from_rotvec(V3::new(0.3 * s as f64, 0.1, 0.0));
            p.beta[1] = 0.5;
            let mut rec = sample_point_cloud(&m, &p, 50, DEFAULT_NOISE, s).unwrap();
            rec.labels = merge_parts(&rec.labels, &map).unwrap();
            records.push(rec);
        }
        let header = DatasetHeader { body: cfg, part_map: map, n_points: 50, n_vertices: m.num_vertices(), noise: DEFAULT_NOISE, seed: 0 };
        (m, Dataset { header, records })
    }

    #[test]
    fn round_trip_within_f32() {
        let (m, ds) = small();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes, m.tree()).unwrap();
        assert_eq!(back.header, ds.header);
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.labels, b.labels);
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p - q).norm() < 1e-6);
            }
            for (p, q) in a.gt_global_rots.iter().zip(&b.gt_global_rots) {
                assert!((p.matrix() - q.matrix()).norm() < 1e-6);
            }
        }
        assert_eq!(peek_body_config(&bytes).unwrap(), ds.header.body);
    }

    #[test]
    fn corruption_is_detected() {
        let (m, ds) = small();
        let bytes = encode_dataset(&ds).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 1], m.tree()).is_err());
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(decode_dataset(&bad, m.tree()).is_err());
    }

    #[test]
    fn obj_export() {
        let mut buf = Vec::new();
        write_obj(&mut buf, &[V3::zeros(), V3::x(), V3::y()], &[[0, 1, 2]]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.ends_with("f 1 2 3\n"));
        assert_eq!(s.lines().count(), 4);
    }
}
