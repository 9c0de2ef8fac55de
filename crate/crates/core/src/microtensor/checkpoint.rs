use super::params::ParamStore;
use super::tensor::Tensor;
use super::TensorError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AQW1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named `f32` weights bound to one rotation-group ordering.
///
/// Layout, little-endian: magic, `u32` version, 32-byte group hash, `u32`
/// metadata count and `(key, value)` strings, `u32` tensor count, then per
/// tensor its name, `u32` rank, `u64` dims and `f32` values. Strings are a
/// `u32` byte length followed by UTF-8.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub group_hash: [u8; 32],
    pub metadata: Vec<(String, String)>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Fails with [`TensorError::HashMismatch`] unless bound to `hash`.
    pub fn require_group(&self, hash: &[u8; 32]) -> Result<(), TensorError> {
        if &self.group_hash != hash {
            return Err(TensorError::HashMismatch);
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(ck.group_hash);
    out.extend((ck.metadata.len() as u32).to_le_bytes());
    for (k, v) in &ck.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.extend((ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        put_str(&mut out, name);
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TensorError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TensorError::Malformed("invalid UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TensorError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(TensorError::Malformed("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Malformed(format!("unsupported version {version}")));
    }
    let group_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let n_meta = r.u32()?;
    let mut metadata = Vec::new();
    for _ in 0..n_meta {
        metadata.push((r.string()?, r.string()?));
    }
    let n_tensors = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(TensorError::Malformed(format!("tensor {name:?} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| TensorError::Malformed("dimension overflow".into()))?);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| TensorError::Malformed("tensor size overflow".into()))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| TensorError::Malformed("tensor size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.insert(&name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { group_hash, metadata, params })
}
