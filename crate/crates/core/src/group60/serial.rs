//! `AQG1` binary encoding of a rotation group.
//!
//! Layout (little-endian): the 4-byte magic `AQG1`, then 60 row-major 3x3
//! `f64` matrices in canonical element order, then the 60x60 Cayley table as
//! `u8` entries, row-major.

use sha2::{Digest, Sha256};

use super::group::{RotationGroup, GROUP_ORDER};
use super::rotation::Rotation;
use super::GroupError;

pub const GROUP_MAGIC: &[u8; 4] = b"AQG1";
const BLOB_LEN: usize = 4 + GROUP_ORDER * 9 * 8 + GROUP_ORDER * GROUP_ORDER;

pub fn encode_group(group: &RotationGroup) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_LEN);
    out.extend_from_slice(GROUP_MAGIC);
    for r in group.elements() {
        for v in r.to_row_major() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for row in group.cayley() {
        out.extend_from_slice(row);
    }
    out
}

/// Decodes and validates an `AQG1` blob.
pub fn decode_group(bytes: &[u8]) -> Result<RotationGroup, GroupError> {
    let group = decode_group_unchecked(bytes)?;
    group.validate()?;
    Ok(group)
}

/// Decodes an `AQG1` blob, checking only its layout and that every element
/// is a rotation. Used to audit tables that may violate the group laws.
pub fn decode_group_unchecked(bytes: &[u8]) -> Result<RotationGroup, GroupError> {
    if bytes.len() != BLOB_LEN || &bytes[..4] != GROUP_MAGIC {
        return Err(GroupError::Malformed("not an AQG1 group blob".into()));
    }
    let mut elements = Vec::with_capacity(GROUP_ORDER);
    let mut off = 4;
    for _ in 0..GROUP_ORDER {
        let mut m = [0.0f64; 9];
        for v in m.iter_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
        let r = Rotation::from_matrix(nalgebra::Matrix3::from_row_slice(&m))?;
        elements.push(r);
    }
    let mut cayley = vec![[0u8; GROUP_ORDER]; GROUP_ORDER];
    for row in cayley.iter_mut() {
        row.copy_from_slice(&bytes[off..off + GROUP_ORDER]);
        off += GROUP_ORDER;
    }
    RotationGroup::from_parts(elements, cayley)
}

/// SHA-256 of the `AQG1` encoding; checkpoints pin the element ordering with it.
pub fn group_hash(group: &RotationGroup) -> [u8; 32] {
    let digest = Sha256::digest(encode_group(group));
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}
