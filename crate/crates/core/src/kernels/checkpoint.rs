//! Binary checkpoint format: a versioned header, string metadata, and a
//! named-tensor table in little-endian f32. Round trips are bit-exact.

use super::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"RCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("non-utf8 name in checkpoint")]
    BadName,
}

/// In-memory checkpoint: ordered named tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for d in tensor.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Truncated("magic"))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut meta = BTreeMap::new();
        let meta_count = read_u32(r, "meta count")?;
        for _ in 0..meta_count {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }
        let count = read_u32(r, "tensor count")?;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(CheckpointError::DuplicateName(name));
            }
            let rank = read_u32(r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r, "dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Truncated("tensor data"))?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<(), CheckpointError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(r, "string length")? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Truncated("string"))?;
    String::from_utf8(buf).map_err(|_| CheckpointError::BadName)
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Truncated(what))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = Checkpoint::new();
        // Values chosen to exercise exact bit patterns, including -0.0 and
        // subnormals.
        let t = Tensor::from_vec(
            &[2, 3],
            vec![1.5, -0.0, f32::MIN_POSITIVE / 2.0, 3.1415927, -7.25e-12, 1e30],
        );
        ckpt.insert("layer.w", t.clone());
        ckpt.insert("layer.b", Tensor::zeros(&[4]));
        ckpt.meta.insert("epoch".into(), "3".into());

        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta["epoch"], "3");
        let rt = back.get("layer.w").unwrap();
        assert_eq!(rt.shape(), t.shape());
        for (a, b) in rt.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE****".to_vec();
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_rejected() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("w", Tensor::zeros(&[16]));
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 7);
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(CheckpointError::Truncated(_))
        ));
    }
}
