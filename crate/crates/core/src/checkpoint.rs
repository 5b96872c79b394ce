//! Parameter snapshots and the `SECK` checkpoint file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "SECK" | version u32 | layer_count u32 | tensor_count u32
//! per tensor: rank u32 | dims u64 × rank | values f64 × prod(dims)
//! content hash: 32 bytes SHA-256 over the tensor section
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SECK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    layer_count: u32,
    tensors: Vec<Tensor>,
    hash: [u8; 32],
}

fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

impl Checkpoint {
    pub fn from_tensors(layer_count: u32, tensors: Vec<Tensor>) -> Self {
        let hash = Sha256::digest(encode_tensors(&tensors)).into();
        Checkpoint {
            layer_count,
            tensors,
            hash,
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn layer_count(&self) -> u32 {
        self.layer_count
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    pub fn hash_hex(&self) -> String {
        self.hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = encode_tensors(&self.tensors);
        let mut out = Vec::with_capacity(16 + body.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.layer_count.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&self.hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint(msg);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(err)? != MAGIC {
            return Err(err("bad magic, not a SECK checkpoint".into()));
        }
        let version = r.u32().map_err(err)?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let layer_count = r.u32().map_err(err)?;
        let count = r.u32().map_err(err)? as usize;
        let body_start = r.pos;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32().map_err(err)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().map_err(err)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8).map_err(err)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        let body_end = r.pos;
        let stored: [u8; 32] = r.take(32).map_err(err)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let computed: [u8; 32] = Sha256::digest(&bytes[body_start..body_end]).into();
        if computed != stored {
            return Err(Error::Corruption("checkpoint content hash mismatch".into()));
        }
        Ok(Checkpoint {
            layer_count,
            tensors,
            hash: stored,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn snapshot(model: &Model) -> Checkpoint {
    Checkpoint::from_tensors(
        model.layers().len() as u32,
        model.params().into_iter().cloned().collect(),
    )
}

pub fn restore(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    let mismatch = |detail: String| Error::Checkpoint(format!("architecture mismatch: {detail}"));
    if model.layers().len() as u32 != ckpt.layer_count {
        return Err(mismatch(format!(
            "model has {} layers, checkpoint {}",
            model.layers().len(),
            ckpt.layer_count
        )));
    }
    let mut params = model.params_mut();
    if params.len() != ckpt.tensors.len() {
        return Err(mismatch(format!(
            "model has {} tensors, checkpoint {}",
            params.len(),
            ckpt.tensors.len()
        )));
    }
    for (i, (p, t)) in params.iter().zip(&ckpt.tensors).enumerate() {
        if p.shape() != t.shape() {
            return Err(mismatch(format!(
                "tensor {i}: model {:?}, checkpoint {:?}",
                p.shape(),
                t.shape()
            )));
        }
    }
    for (p, t) in params.iter_mut().zip(&ckpt.tensors) {
        p.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_classifier, ModelSpec};

    #[test]
    fn snapshot_restore_is_bit_exact() {
        let mut model = build_classifier(ModelSpec::classifier(10), 3).unwrap();
        let ckpt = snapshot(&model);
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += 0.125);
        }
        assert_ne!(snapshot(&model), ckpt);
        restore(&mut model, &ckpt).unwrap();
        let again = snapshot(&model);
        for (a, b) in again.tensors().iter().zip(ckpt.tensors()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(again.hash(), ckpt.hash());
    }

    #[test]
    fn hash_is_stable() {
        let model = build_classifier(ModelSpec::classifier(10), 3).unwrap();
        assert_eq!(snapshot(&model).hash(), snapshot(&model).hash());
    }

    #[test]
    fn restore_rejects_other_architecture() {
        let a = build_classifier(ModelSpec::classifier(10), 3).unwrap();
        let mut b = build_classifier(ModelSpec::classifier(5), 3).unwrap();
        assert!(matches!(
            restore(&mut b, &snapshot(&a)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let model = build_classifier(ModelSpec::classifier(10), 4).unwrap();
        let ckpt = snapshot(&model);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.seck");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

        let mut bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..4], b"SECK");
        bytes[100] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Corruption(_))
        ));
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }
}
